"""Regularized bilevel marginal/cost identification.

Upper level: choose a probability measure ``mu1`` on the first domain and a
cost ``c`` on the product domain.  Lower level: the regularized transport
plan between the mollified marginals on the dilated domain, restricted back
to the original domain.  The outer loop is a projected finite-difference
descent with random restarts; the lower-level solution map is only
Hoelder-1/2 continuous, so no adjoint is attempted.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .grid import Field, Grid2D, lp_norm, w1p_seminorm_penalty
from .measures import (DiscreteMeasure, dilate, extend_by_zero, mollify_weights,
                       restrict)
from .qot import DualPotentials, QotError, QotProblem, SolverOptions, solve

log = logging.getLogger(__name__)

MASS_TOL = 1e-12


@dataclass
class OuterOptions:
    step0: float = 1.0
    shrink: float = 0.5
    max_iters: int = 500
    fd_step: float = 1e-5
    restarts: int = 0
    seed: int = 0
    optimize_cost: bool = True
    cost_batch: int = 16
    max_backtracks: int = 40
    min_decrease: float = 1e-10
    threads: int = 1


@dataclass(eq=False)
class BilevelConfig:
    gamma: float
    delta: float
    cost_ref: Field
    mu2_data: DiscreteMeasure
    obs_plan: Field
    obs_mask: Optional[np.ndarray] = None
    obs_mu1: Optional[DiscreteMeasure] = None
    obs_mu1_mask: Optional[np.ndarray] = None
    p: float = 3.0
    nu: float = 0.0
    objective_norm: str = "L2"
    outer: OuterOptions = field(default_factory=OuterOptions)
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(tol=1e-11))

    def __post_init__(self):
        if not self.gamma > 0 or not self.delta > 0:
            raise ValueError("gamma and delta must be positive")
        if self.p <= 2:
            raise ValueError(f"penalty exponent must exceed 2, got {self.p}")
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")
        if self.objective_norm not in ("L1", "L2"):
            raise ValueError(f"objective_norm must be 'L1' or 'L2', got {self.objective_norm!r}")
        if abs(self.mu2_data.total_mass - 1.0) > MASS_TOL:
            raise ValueError("mu2_data must have unit mass")
        g = self.cost_ref.grid
        if not isinstance(g, Grid2D) or g.gy != self.mu2_data.grid:
            raise ValueError("cost_ref must live on (Omega_1 grid) x (mu2_data grid)")
        if self.obs_plan.grid != g:
            raise ValueError("obs_plan must live on the cost grid")
        if self.obs_mask is None:
            self.obs_mask = np.ones(g.shape, dtype=bool)
        self.obs_mask = np.asarray(self.obs_mask, dtype=bool).reshape(g.shape)
        if self.obs_mu1 is not None and self.obs_mu1_mask is None:
            self.obs_mu1_mask = np.ones(g.gx.n, dtype=bool)

    @property
    def grid(self) -> Grid2D:
        return self.cost_ref.grid

    @property
    def dilated_grid(self) -> Grid2D:
        g = self.grid
        return Grid2D(dilate(g.gx, self.delta), dilate(g.gy, self.delta))


@dataclass(eq=False)
class BilevelState:
    mu1: DiscreteMeasure
    cost: Field
    plan: Optional[Field] = None
    J_value: float = math.inf
    Jgamma_value: float = math.inf
    penalty: float = 0.0
    history: list = field(default_factory=list)
    log: list = field(default_factory=list, repr=False)
    duals: Optional[DualPotentials] = field(default=None, repr=False)
    max_trial_mass: float = 0.0
    trials: int = 0
    rejected_trials: int = 0

    def summary(self) -> dict:
        return {
            "J": self.J_value,
            "Jgamma": self.Jgamma_value,
            "penalty": self.penalty,
            "mu1": [float(x) for x in self.mu1.weights],
            "accepted_steps": len(self.history) - 1 if self.history else 0,
            "max_trial_mass": self.max_trial_mass,
            "trials": self.trials,
            "rejected_trials": self.rejected_trials,
        }


def forward_map(mu1, cost: Field, cfg: BilevelConfig,
                warm: DualPotentials | None = None, return_duals: bool = False):
    """Restricted regularized plan for upper-level variables ``(mu1, cost)``.

    ``mu1`` may be a :class:`DiscreteMeasure` or a raw weight array (finite
    difference probes step a hair outside the nonnegative cone).
    """
    weights = mu1.weights if isinstance(mu1, DiscreteMeasure) else np.asarray(mu1, float)
    g = cfg.grid
    g1, d1 = mollify_weights(weights, g.gx, cfg.delta)
    g2, d2 = mollify_weights(cfg.mu2_data.weights, g.gy, cfg.delta)
    big = Grid2D(g1, g2)
    prob = QotProblem(extend_by_zero(cost, big), Field(g1, d1), Field(g2, d2), cfg.gamma)
    sol = solve(prob, cfg.solver, init=warm)
    plan = restrict(sol.plan, g)
    if return_duals:
        return plan, sol.duals
    return plan


def upper_objective(plan: Field, mu1, cfg: BilevelConfig, norm: str | None = None) -> float:
    norm = norm or cfg.objective_norm
    diff = (plan.values - cfg.obs_plan.values)[cfg.obs_mask]
    w = mu1.weights if isinstance(mu1, DiscreteMeasure) else np.asarray(mu1, float)
    if norm == "L1":
        val = float(np.sum(np.abs(diff))) * plan.grid.cell_area
    else:
        val = float(np.sum(diff * diff)) * plan.grid.cell_area
    if cfg.nu > 0 and cfg.obs_mu1 is not None:
        dm = (w - cfg.obs_mu1.weights)[cfg.obs_mu1_mask]
        val += cfg.nu * float(np.sum(np.abs(dm)) if norm == "L1" else np.sum(dm * dm))
    return val


def cost_penalty(cost: Field, cfg: BilevelConfig) -> float:
    return w1p_seminorm_penalty(cost - cfg.cost_ref, cfg.p) / (cfg.p * cfg.gamma)


def eval_Jgamma(mu1, cost: Field, cfg: BilevelConfig, plan: Field | None = None,
                warm: DualPotentials | None = None) -> tuple[float, float, float]:
    """``(J_gamma, J, penalty)`` at a candidate point."""
    if plan is None:
        plan = forward_map(mu1, cost, cfg, warm=warm)
    j = upper_objective(plan, mu1, cfg)
    pen = cost_penalty(cost, cfg)
    return j + pen, j, pen


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, sum w = 1}`` (sort-and-threshold)."""
    v = np.asarray(v, dtype=float).reshape(-1)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    w = np.maximum(v - tau, 0.0)
    # pin the mass exactly; the correction is at rounding level
    w[np.argmax(w)] += 1.0 - w.sum()
    return w


def project_feasible(mu1_raw, grid) -> DiscreteMeasure:
    return DiscreteMeasure(grid, project_simplex(mu1_raw))


class _Evaluator:
    """Objective evaluations with trial bookkeeping (mass bound, failures)."""

    def __init__(self, cfg: BilevelConfig):
        self.cfg = cfg
        self.trials = 0
        self.rejected = 0
        self.max_mass = 0.0
        self.mass_violations = 0

    def _solve(self, weights, cost_values, warm):
        cost = Field(self.cfg.grid, cost_values)
        try:
            plan, duals = forward_map(weights, cost, self.cfg, warm=warm, return_duals=True)
        except QotError as exc:
            log.debug("trial point rejected: %s", exc)
            return None
        return cost, plan, duals

    def _record(self, weights, out):
        # bookkeeping runs on the calling thread, in submission order
        self.trials += 1
        if out is None:
            self.rejected += 1
            return math.inf, math.inf, math.inf, None, None
        cost, plan, duals = out
        mass = lp_norm(plan, 1)
        self.max_mass = max(self.max_mass, mass)
        if mass > 1.0 + self.cfg.delta + MASS_TOL:
            self.mass_violations += 1
        jg, j, pen = eval_Jgamma(weights, cost, self.cfg, plan=plan)
        return jg, j, pen, plan, duals

    def __call__(self, weights, cost_values, warm=None):
        return self._record(weights, self._solve(weights, cost_values, warm))

    def many(self, points, warm, threads):
        if threads > 1 and len(points) > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                outs = list(ex.map(lambda pt: self._solve(pt[0], pt[1], warm), points))
        else:
            outs = [self._solve(w, c, warm) for w, c in points]
        return [self._record(w, o)[0] for (w, _), o in zip(points, outs)]


def _fd_gradient(ev, mu, cost, warm, cfg, rng):
    out = cfg.outer
    n = mu.size
    h = out.fd_step * max(float(np.max(mu)), 1.0 / n)
    points = []
    for k in range(n):
        d = -np.full(n, 1.0 / n)
        d[k] += 1.0
        points.append((mu + h * d, cost))
        points.append((mu - h * d, cost))
    batch = np.array([], dtype=int)
    if out.optimize_cost and out.cost_batch > 0:
        size = cost.size
        batch = np.sort(rng.choice(size, size=min(out.cost_batch, size), replace=False))
        hc = out.fd_step * max(float(np.max(np.abs(cost))), 1.0)
        for idx in batch:
            e = np.zeros(size)
            e[idx] = hc
            e = e.reshape(cost.shape)
            points.append((mu, cost + e))
            points.append((mu, cost - e))
    vals = np.array(ev.many(points, warm, out.threads))
    gmu = (vals[0:2 * n:2] - vals[1:2 * n:2]) / (2 * h)
    gc = np.zeros(cost.size)
    if batch.size:
        rest = vals[2 * n:]
        gc[batch] = (rest[0::2] - rest[1::2]) / (2 * hc)
    gmu[~np.isfinite(gmu)] = 0.0
    gc[~np.isfinite(gc)] = 0.0
    return gmu, gc.reshape(cost.shape), batch


def _descend(cfg: BilevelConfig, mu0: np.ndarray, c0: np.ndarray, ev: _Evaluator,
             rng: np.random.Generator, tag: str) -> BilevelState:
    out = cfg.outer
    g = cfg.grid
    mu = project_simplex(mu0)
    cost = np.array(c0, dtype=float)
    jg, j, pen, plan, duals = ev(mu, cost)
    if not math.isfinite(jg):
        raise QotError("forward map failed at the starting point")
    history = [(0, jg)]
    records = [{"run": tag, "iter": 0, "Jgamma": jg, "J": j, "penalty": pen,
                "step": 0.0, "accepted": True, "mass": float(mu.sum()),
                "min_weight": float(mu.min())}]
    step = out.step0
    for it in range(1, out.max_iters + 1):
        if jg <= 0.0:
            break
        gmu, gc, _ = _fd_gradient(ev, mu, cost, duals, cfg, rng)
        if not (np.any(gmu) or np.any(gc)):
            break
        accepted = False
        t = step
        for _ in range(out.max_backtracks + 1):
            mu_t = project_simplex(mu - t * gmu)
            c_t = cost - t * gc if out.optimize_cost else cost
            jg_t, j_t, pen_t, plan_t, duals_t = ev(mu_t, c_t, duals)
            if jg_t < jg:
                accepted = True
                break
            t *= out.shrink
        cur = mu_t if accepted else mu
        records.append({"run": tag, "iter": it, "Jgamma": jg_t if accepted else jg,
                        "J": j_t if accepted else j, "penalty": pen_t if accepted else pen,
                        "step": t, "accepted": accepted, "mass": float(cur.sum()),
                        "min_weight": float(cur.min())})
        if not accepted:
            break
        decrease = jg - jg_t
        mu, cost = mu_t, c_t
        jg, j, pen, plan, duals = jg_t, j_t, pen_t, plan_t, duals_t
        history.append((it, jg))
        step = t / out.shrink
        if decrease < out.min_decrease:
            break
    return BilevelState(
        mu1=DiscreteMeasure(g.gx, mu), cost=Field(g, cost), plan=plan,
        J_value=j, Jgamma_value=jg, penalty=pen, history=history, log=records,
        duals=duals,
    )


def solve_bilevel(cfg: BilevelConfig, init: BilevelState | None = None) -> BilevelState:
    """Best state over the main descent run and ``cfg.outer.restarts`` random restarts."""
    g = cfg.grid
    rng = np.random.default_rng(cfg.outer.seed)
    if init is None:
        mu0 = np.full(g.gx.n, 1.0 / g.gx.n)
        c0 = np.array(cfg.cost_ref.values)
    else:
        mu0 = np.asarray(init.mu1.weights, dtype=float)
        c0 = np.array(init.cost.values)
    ev = _Evaluator(cfg)
    starts = [(mu0, c0)]
    for _ in range(cfg.outer.restarts):
        starts.append((rng.dirichlet(np.ones(g.gx.n)), np.array(cfg.cost_ref.values)))
    runs = []
    for k, (m, c) in enumerate(starts):
        run_rng = np.random.default_rng([cfg.outer.seed, k])
        runs.append(_descend(cfg, m, c, ev, run_rng, "main" if k == 0 else f"restart{k}"))
    best = min(runs, key=lambda s: s.Jgamma_value)
    best.log = [rec for r in runs for rec in r.log]
    best.max_trial_mass = ev.max_mass
    best.trials = ev.trials
    best.rejected_trials = ev.rejected
    best.mass_violations = ev.mass_violations
    best.runs = [{"Jgamma": r.Jgamma_value, "history": r.history} for r in runs]
    return best


def gamma_delta_path(cfg: BilevelConfig, schedule, init: BilevelState | None = None):
    """Warm-started :func:`solve_bilevel` along a list of ``(gamma, delta)`` pairs."""
    gammas = [float(gm) for gm, _ in schedule]
    if any(b > a for a, b in zip(gammas, gammas[1:])):
        raise ValueError("schedule must be nonincreasing in gamma")
    states = []
    state = init
    for gm, dl in schedule:
        step_cfg = replace(cfg, gamma=float(gm), delta=float(dl))
        state = solve_bilevel(step_cfg, init=state)
        diff = state.cost - cfg.cost_ref
        state.cost_distance = w1p_seminorm_penalty(diff, cfg.p) ** (1.0 / cfg.p)
        state.gamma, state.delta = float(gm), float(dl)
        states.append(state)
    return states


def synthetic_instance(n: int = 16, gamma: float = 1.0, delta: float = 0.1, seed: int = 0,
                       lo: float = 0.0, hi: float = 1.0, outer: OuterOptions | None = None,
                       obs_gamma: float | None = None, obs_delta: float | None = None):
    """Self-consistent inverse problem: observations generated by the forward map.

    Returns ``(cfg, mu1_true)``.  The hidden measure is a seeded random
    simplex point; ``c_d = |x1 - x2|^2``; the observation window is the
    whole domain and ``nu = 0``.  ``obs_gamma``/``obs_delta`` generate the
    observation with different parameters than the ones the config solves with.
    """
    from .grid import build_grid, sample
    from .measures import uniform_measure

    # separate stream from the outer-loop restarts, which also start from `seed`
    rng = np.random.default_rng([seed, 0xB11E])
    g1 = build_grid(lo, hi, n)
    g = Grid2D(g1, g1)
    c_d = sample(g, lambda x1, x2: (x1 - x2) ** 2)
    mu2 = uniform_measure(g1)
    mu_true = DiscreteMeasure(g1, project_simplex(rng.dirichlet(np.ones(n))))
    gen = BilevelConfig(gamma=obs_gamma or gamma, delta=obs_delta or delta, cost_ref=c_d,
                        mu2_data=mu2, obs_plan=Field(g, np.zeros(g.shape)))
    obs = forward_map(mu_true, c_d, gen)
    cfg = BilevelConfig(gamma=gamma, delta=delta, cost_ref=c_d, mu2_data=mu2,
                        obs_plan=obs, outer=outer or OuterOptions())
    return cfg, mu_true
