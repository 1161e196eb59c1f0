"""Numerical probes of the regularized solution map.

* the oscillating counterexample showing that weak limits of optimal plans
  need not be optimal for the weak-limit marginals;
* the energy identity behind the L^2 plan bound;
* boundedness of zero-mean dual potentials over bounded data families;
* the Hoelder-1/2 modulus of the data-to-plan map;
* convergence of LP optimal values under mollified marginals.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import Field, Grid2D, build_grid, lp_norm, product_grid, sample
from .lp import solve_lp
from .measures import DiscreteMeasure, marginals, mollify_shift
from .qot import (DualPotentials, QotError, QotProblem, SolverOptions,
                  dual_residual, energy_identity_residual, normalize_zero_mean,
                  plan_from_duals, primal_objective, solve)

PROBE_SOLVER = SolverOptions(tol=1e-12)


def _map(func, items, threads=1):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(func, items))
    return [func(x) for x in items]


# --------------------------------------------------------------------------
# oscillating counterexample


@dataclass(eq=False)
class CounterexampleFields:
    n: int
    cost: Field
    alpha1n: Field
    alpha2n: Field
    plan_n: Field
    limit_plan: Field
    branch_average: Field
    mu1n: Field
    mu2n: Field
    mu1_lim: Field
    mu2_lim: Field

    @property
    def duals(self) -> DualPotentials:
        return DualPotentials(self.alpha1n, self.alpha2n)


def square_wave(x):
    return np.sign(np.sin(2.0 * np.pi * x))


def counterexample_fields(n: int, resolution: int) -> CounterexampleFields:
    """Closed-form fields of the oscillating example on ``[0,1]^2`` with gamma = 1.

    ``resolution`` must be a multiple of ``4 n`` so that no cell straddles a
    sign change of ``f(n x)`` or the midpoint 1/2.
    """
    if n < 1 or resolution < 1 or resolution % (4 * n):
        raise ValueError(f"resolution {resolution} is not a multiple of 4n = {4 * n}")
    g1 = build_grid(0.0, 1.0, resolution)
    g = product_grid(g1, g1)
    x = g1.centers
    left = x <= 0.5
    cost = sample(g, lambda x1, x2: 0.25 * (x1 - x2) ** 2)
    shift1 = np.where(left, 9 / 4, 5 / 4)
    a1 = square_wave(n * x) + shift1
    a2 = np.where(left, 0.0, -0.5)
    alpha1, alpha2 = Field(g1, a1), Field(g1, a2)
    plan_n = plan_from_duals(DualPotentials(alpha1, alpha2), cost, 1.0)

    x1, x2 = g.mesh()
    sq = (x1 - x2) ** 2
    l1, l2 = x1 <= 0.5, x2 <= 0.5
    limit = np.select(
        [l1 & l2, ~l1 & l2, l1 & ~l2],
        [9 / 4 - sq / 4, 5 / 4 - sq / 4, 7 / 4 - sq / 4],
        default=7 / 8 - sq / 8,
    )
    limit_plan = Field(g, limit)

    # weak limit of the oscillating plans: average of the f = +1 and f = -1 branches
    up = plan_from_duals(DualPotentials(Field(g1, shift1 + 1), alpha2), cost, 1.0)
    down = plan_from_duals(DualPotentials(Field(g1, shift1 - 1), alpha2), cost, 1.0)
    avg = Field(g, 0.5 * (up.values + down.values))
    mu1n, mu2n = marginals(plan_n)
    mu1_lim, mu2_lim = marginals(avg)
    return CounterexampleFields(n, cost, alpha1, alpha2, plan_n, limit_plan, avg,
                                mu1n, mu2n, mu1_lim, mu2_lim)


def mu1_infimum() -> float:
    """Exact infimum of the first oscillating marginal over n and x1.

    Attained as x1 -> 1 on the f = -1 branch:
    ``int_0^{1/2} (1/4 - (1 - x2)^2 / 4) dx2 = 5/96``.
    """
    return 5.0 / 96.0


def dual_fit_residual(target: Field) -> float:
    """L^2 distance from ``target`` to the set of direct sums ``a1 (+) a2``."""
    t = target.values
    fit = t.mean(axis=1, keepdims=True) + t.mean(axis=0, keepdims=True) - t.mean()
    return lp_norm(Field(target.grid, t - fit), 2)


def counterexample_limit(resolution: int, gamma: float = 1.0,
                         opts: SolverOptions | None = None) -> dict:
    """Compare the weak-limit plan with the true optimum at the limit marginals."""
    ce = counterexample_fields(1, resolution)
    prob = QotProblem(ce.cost, ce.mu1_lim, ce.mu2_lim, gamma)
    sol = solve(prob, opts or PROBE_SOLVER)
    m1, m2 = marginals(ce.limit_plan)
    feas = max(lp_norm(m1 - ce.mu1_lim, math.inf), lp_norm(m2 - ce.mu2_lim, math.inf))
    k_hat = primal_objective(sol.plan, ce.cost, gamma)
    k_lim = primal_objective(ce.limit_plan, ce.cost, gamma)
    return {
        "resolution": resolution,
        "K_optimal": k_hat,
        "K_limit_plan": k_lim,
        "gap": k_lim - k_hat,
        "l2_distance": lp_norm(sol.plan - ce.limit_plan, 2),
        "limit_feasibility_residual": feas,
        "limit_formula_error": lp_norm(ce.limit_plan - ce.branch_average, math.inf),
        "solver_residual": sol.marginal_residual,
        "dual_fit_residual_limit": dual_fit_residual(ce.limit_plan + ce.cost),
        "dual_fit_residual_optimal": (dual_fit_residual(gamma * sol.plan + ce.cost)
                                      if np.all(sol.plan.values > 0) else None),
    }


def run_counterexample(n_list=(1, 2, 4, 8), resolution: int = 512, gamma: float = 1.0,
                       stability_resolutions=(256, 512), opts: SolverOptions | None = None) -> dict:
    opts = opts or PROBE_SOLVER
    per_n = []
    for n in n_list:
        ce = counterexample_fields(n, resolution)
        prob = QotProblem(ce.cost, ce.mu1n, ce.mu2n, gamma)
        r1, r2 = dual_residual(ce.duals, prob)
        sol = solve(prob, opts)
        per_n.append({
            "n": n,
            "system_residual": max(lp_norm(r1, math.inf), lp_norm(r2, math.inf)),
            "plan_formula_residual": float(np.max(np.abs(
                ce.plan_n.values - np.maximum(ce.alpha1n.values[:, None]
                                              + ce.alpha2n.values[None, :]
                                              - ce.cost.values, 0.0) / gamma))),
            "solver_recovery_l2": lp_norm(sol.plan - ce.plan_n, 2),
            "min_mu1n": float(ce.mu1n.values.min()),
            "min_mu2n": float(ce.mu2n.values.min()),
        })
    limits = [counterexample_limit(r, gamma, opts) for r in stability_resolutions]
    main = next((x for x in limits if x["resolution"] == resolution), None)
    if main is None:
        main = counterexample_limit(resolution, gamma, opts)
    gaps = [x["gap"] for x in limits]
    drift = (max(gaps) - min(gaps)) / max(abs(g) for g in gaps) if gaps else 0.0
    return {
        "gamma": gamma,
        "resolution": resolution,
        "per_n": per_n,
        "limit": main,
        "stability": limits,
        "gap_relative_drift": drift,
        "mu_lower_bound_claimed": 1.0 / 16.0,
        "mu1_exact_infimum": mu1_infimum(),
    }


# --------------------------------------------------------------------------
# energy identity


def energy_identity_check(sol, prob: QotProblem) -> float:
    return energy_identity_residual(sol, prob)


# --------------------------------------------------------------------------
# random bounded instance families


@dataclass
class InstanceFamily:
    """Smooth random data with a few bounded parameters.

    Marginal densities ``mu = (1 + a sin(2 pi k x + phase)) / |Omega|`` are
    bounded below by ``(1 - a_max)/|Omega|``; costs are
    ``b |x1 - x2|^2 + e cos(pi (k1 x1 + k2 x2))`` shifted to be nonnegative.
    """

    n: int = 32
    gamma: float = 1.0
    a_max: float = 0.8
    b_max: float = 2.0
    e_max: float = 0.5

    @property
    def grid(self) -> Grid2D:
        g1 = build_grid(0.0, 1.0, self.n)
        return product_grid(g1, g1)

    @property
    def mu_floor(self) -> float:
        return 1.0 - self.a_max

    def draw(self, rng: np.random.Generator):
        g = self.grid
        x = g.gx.centers

        def density():
            a = rng.uniform(0, self.a_max)
            k = int(rng.integers(1, 4))
            return 1.0 + a * np.sin(2 * np.pi * k * x + rng.uniform(0, 2 * np.pi))

        m1, m2 = density(), density()
        m1 /= m1.mean()
        m2 /= m2.mean()
        b = rng.uniform(0, self.b_max)
        e = rng.uniform(0, self.e_max)
        k1, k2 = rng.integers(1, 4, size=2)
        x1, x2 = g.mesh()
        c = b * (x1 - x2) ** 2 + e * np.cos(np.pi * (k1 * x1 + k2 * x2)) + e
        return QotProblem(Field(g, c), Field(g.gx, m1), Field(g.gy, m2), self.gamma)

    def direction(self, rng: np.random.Generator):
        """Unit-L^2 perturbation of (cost, mu1, mu2); marginal parts have zero mass."""
        g = self.grid
        x = g.gx.centers

        def smooth1d():
            v = sum(rng.normal() * np.cos(np.pi * k * x) for k in range(1, 4))
            return v - v.mean()

        x1, x2 = g.mesh()
        dc = sum(rng.normal() * np.cos(np.pi * (k * x1 + l * x2))
                 for k in range(3) for l in range(3))
        d = [Field(g, dc), Field(g.gx, smooth1d()), Field(g.gy, smooth1d())]
        norm = math.sqrt(sum(lp_norm(f, 2) ** 2 for f in d))
        return [f * (1.0 / norm) for f in d]


@dataclass
class ProbeReport:
    samples: int
    ratios: dict
    fitted_exponent: float
    max_ratio: float
    seed: int
    discarded: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("a probe report needs at least one sample")

    def to_dict(self) -> dict:
        return asdict(self)


def _summary(values) -> dict:
    v = np.sort(np.asarray(values, dtype=float))
    return {
        "min": float(v[0]),
        "median": float(np.median(v)),
        "q90": float(np.quantile(v, 0.9)),
        "max": float(v[-1]),
    }


def _perturb(prob: QotProblem, d, t: float) -> QotProblem:
    dc, d1, d2 = d
    m1 = prob.mu1.values + t * d1.values
    m2 = prob.mu2.values + t * d2.values
    if m1.min() <= 0 or m2.min() <= 0:
        raise ValueError("perturbation leaves the positive cone")
    return QotProblem(prob.cost + t * dc.values, Field(prob.mu1.grid, m1),
                      Field(prob.mu2.grid, m2), prob.gamma)


def _holder_trial(args):
    family, seed, scales = args
    rng = np.random.default_rng(seed)
    prob = family.draw(rng)
    d = family.direction(rng)
    try:
        base = solve(prob, PROBE_SOLVER)
        dists = []
        for t in scales:
            if t == 0:
                dists.append(0.0)
                continue
            other = solve(_perturb(prob, d, t), PROBE_SOLVER, init=base.duals)
            dists.append(lp_norm(other.plan - base.plan, 2))
    except (QotError, ValueError):
        return None
    return dists


def holder_probe(trials: int = 100, scales=(1e-1, 1e-2, 1e-3, 1e-4, 1e-5), seed: int = 0,
                 family: InstanceFamily | None = None, threads: int = 1) -> ProbeReport:
    """Sample ``r(t) = ||S(x + t d) - S(x)||_{L^2}`` along random unit directions."""
    family = family or InstanceFamily()
    scales = [float(t) for t in scales]
    seeds = np.random.SeedSequence(seed).spawn(trials)
    results = _map(_holder_trial, [(family, s, scales) for s in seeds], threads)
    kept = [r for r in results if r is not None]
    if not kept:
        raise QotError("every probe trial failed")
    pos = [t for t in scales if t > 0]
    r = np.array([[d for d, t in zip(row, scales) if t > 0] for row in kept])
    ratios = r / np.sqrt(np.array(pos))[None, :]
    with np.errstate(divide="ignore"):
        logs_r = np.log(r)
    logt = np.log(np.array(pos))
    ok = np.all(np.isfinite(logs_r), axis=1)
    # pooled slope with one intercept per trial
    lt = logt - logt.mean()
    lr = logs_r[ok] - logs_r[ok].mean(axis=1, keepdims=True)
    exponent = float(np.sum(lr * lt[None, :]) / (lt @ lt * max(ok.sum(), 1)))
    per_trial = (lr @ lt) / (lt @ lt)
    max_per_trial = ratios.max(axis=1)
    return ProbeReport(
        samples=len(kept),
        ratios=_summary(max_per_trial),
        fitted_exponent=exponent,
        max_ratio=float(max_per_trial.max()),
        seed=seed,
        discarded=trials - len(kept),
        extra={
            "scales": pos,
            "per_trial_exponent": _summary(per_trial) if per_trial.size else {},
            "max_ratio_by_scale": [float(v) for v in ratios.max(axis=0)],
            "max_ratio_prefix_half": float(max_per_trial[: max(1, len(kept) // 2)].max()),
        },
    )


def data_scale(prob: QotProblem) -> float:
    """``||mu1||_2 ||mu2||_2 + ||c||_2 + 1``, the base of the dual bounds."""
    return lp_norm(prob.mu1, 2) * lp_norm(prob.mu2, 2) + lp_norm(prob.cost, 2) + 1.0


def _dual_trial(args):
    family, seed = args
    rng = np.random.default_rng(seed)
    prob = family.draw(rng)
    try:
        sol = solve(prob, PROBE_SOLVER)
    except QotError:
        return None
    duals = normalize_zero_mean(sol.duals)
    a1, a2 = duals.alpha1, duals.alpha2
    base = data_scale(prob)
    return {
        "l1_ratio": (lp_norm(a1, 1) + lp_norm(a2, 1)) / base**2,
        "l2_ratio": (lp_norm(a1, 2) + lp_norm(a2, 2)) / base**6,
        "mean_alpha2": abs(float(np.sum(a2.values)) * a2.grid.h),
        "energy_residual": energy_identity_residual(sol, prob),
    }


def dual_bound_probe(trials: int = 100, seed: int = 0, family: InstanceFamily | None = None,
                     threads: int = 1) -> ProbeReport:
    """Normalized sizes of zero-mean dual potentials over a bounded data family."""
    family = family or InstanceFamily(n=16)
    seeds = np.random.SeedSequence(seed).spawn(trials)
    results = _map(_dual_trial, [(family, s) for s in seeds], threads)
    kept = [r for r in results if r is not None]
    if not kept:
        raise QotError("every probe trial failed")
    l1 = [r["l1_ratio"] for r in kept]
    l2 = [r["l2_ratio"] for r in kept]
    return ProbeReport(
        samples=len(kept),
        ratios={"l1": _summary(l1), "l2": _summary(l2)},
        fitted_exponent=float("nan"),
        max_ratio=float(max(l1)),
        seed=seed,
        discarded=trials - len(kept),
        extra={
            "max_l1_ratio": float(max(l1)),
            "max_l2_ratio": float(max(l2)),
            "max_abs_mean_alpha2": float(max(r["mean_alpha2"] for r in kept)),
            "max_energy_residual": float(max(r["energy_residual"] for r in kept)),
        },
    )


# --------------------------------------------------------------------------
# LP stability under mollification


def _lp_value_on(mu1: DiscreteMeasure, mu2: DiscreteMeasure, cost_fn) -> float:
    g = product_grid(mu1.grid, mu2.grid)
    plan, _ = solve_lp(sample(g, cost_fn), mu1, mu2)
    return plan.cost_value


def stability_probe(mu1: DiscreteMeasure, mu2: DiscreteMeasure, deltas,
                    cost_fn=lambda x1, x2: (x1 - x2) ** 2) -> dict:
    """LP optimal values for mollified marginals against the value at the target."""
    target = _lp_value_on(mu1, mu2, cost_fn)
    values = []
    for delta in deltas:
        f1 = mollify_shift(mu1, delta)
        f2 = mollify_shift(mu2, delta)
        values.append(_lp_value_on(DiscreteMeasure.from_density(f1),
                                   DiscreteMeasure.from_density(f2), cost_fn))
    errors = [abs(v - target) for v in values]
    return {
        "target_value": target,
        "deltas": [float(d) for d in deltas],
        "values": values,
        "errors": errors,
        "successive_differences": [abs(b - a) for a, b in zip(values, values[1:])],
    }
