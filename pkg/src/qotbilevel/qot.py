"""Quadratically regularized optimal transport on product grids.

The primal problem is

    min  int c pi + gamma/2 ||pi||^2   s.t.  pi >= 0, marginals(pi) = (mu1, mu2)

and it is solved through its dual: the optimal plan is
``(a1 (+) a2 - c)_+ / gamma`` for potentials ``(a1, a2)`` solving the
marginal equations.  Those equations are semismooth; a regularized
semismooth Newton method with an exact line search solves them, and exact
block-coordinate sweeps (each row, then each column, maximized in closed
form) serve as the safeguard.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import Field, Grid2D, integrate, lp_norm
from .measures import marginals

log = logging.getLogger(__name__)


class QotError(RuntimeError):
    pass


class InfeasibleMasses(QotError, ValueError):
    """Marginals with different total mass (or negative values): no feasible plan."""


class NonConvergence(QotError):
    """Iteration cap reached; ``solution`` holds the best iterate."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class EmptyActiveRow(QotError):
    """A Newton row lost its whole active set.

    Raised only when the row regularization cannot restore progress; the
    solver otherwise handles the situation internally.
    """


MASS_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class QotProblem:
    cost: Field
    mu1: Field
    mu2: Field
    gamma: float

    def __post_init__(self):
        g = self.cost.grid
        if not isinstance(g, Grid2D):
            raise ValueError("cost must live on a product grid")
        if self.mu1.grid != g.gx or self.mu2.grid != g.gy:
            raise ValueError("marginal grids do not match the factors of the cost grid")
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if np.any(self.mu1.values < 0) or np.any(self.mu2.values < 0):
            raise InfeasibleMasses("marginal densities must be nonnegative")
        m1, m2 = integrate(self.mu1), integrate(self.mu2)
        if abs(m1 - m2) > MASS_RTOL * max(m1, m2, 1e-300):
            raise InfeasibleMasses(f"marginal masses differ: {m1!r} vs {m2!r}")

    @property
    def grid(self) -> Grid2D:
        return self.cost.grid

    @property
    def mass(self) -> float:
        return integrate(self.mu1)

    @property
    def c_lower(self) -> float:
        return float(np.min(self.cost.values))

    @property
    def duals_certified(self) -> bool:
        """Strictly positive marginals guarantee existence of dual potentials."""
        return bool(min(self.mu1.values.min(), self.mu2.values.min()) >= 1e-12)


@dataclass(frozen=True, eq=False)
class DualPotentials:
    alpha1: Field
    alpha2: Field
    zero_mean: bool = False


@dataclass
class SolverOptions:
    tol: float = 1e-9
    max_newton: int = 200
    max_fallback: int = 2000
    tikhonov: float = 1e-12
    raise_on_failure: bool = True


@dataclass(eq=False)
class QotSolution:
    plan: Field
    duals: DualPotentials
    marginal_residual: float
    primal_value: float
    dual_value: float
    iterations: int
    converged: bool
    duals_certified: bool = True
    newton_steps: int = 0
    fallback_steps: int = 0
    dual_history: list = field(default_factory=list, repr=False)

    def diagnostics(self) -> dict:
        return {
            "primal_value": self.primal_value,
            "dual_value": self.dual_value,
            "marginal_residual": self.marginal_residual,
            "iterations": self.iterations,
            "newton_steps": self.newton_steps,
            "fallback_steps": self.fallback_steps,
            "converged": self.converged,
            "duals_certified": self.duals_certified,
        }


def plan_from_duals(duals: DualPotentials, cost: Field, gamma: float) -> Field:
    s = duals.alpha1.values[:, None] + duals.alpha2.values[None, :] - cost.values
    return Field(cost.grid, np.maximum(s, 0.0) / gamma)


def dual_residual(duals: DualPotentials, prob: QotProblem) -> tuple[Field, Field]:
    m1, m2 = marginals(plan_from_duals(duals, prob.cost, prob.gamma))
    return m1 - prob.mu1, m2 - prob.mu2


def dual_objective(duals: DualPotentials, prob: QotProblem) -> float:
    """``-1/2 ||(a1 (+) a2 - c)_+||^2 + gamma * sum_i int a_i mu_i``."""
    s = duals.alpha1.values[:, None] + duals.alpha2.values[None, :] - prob.cost.values
    sp = np.maximum(s, 0.0)
    g = prob.grid
    quad = 0.5 * np.sum(sp * sp) * g.cell_area
    lin = np.dot(duals.alpha1.values, prob.mu1.values) * g.gx.h
    lin += np.dot(duals.alpha2.values, prob.mu2.values) * g.gy.h
    return float(prob.gamma * lin - quad)


def primal_objective(plan: Field, cost: Field, gamma: float) -> float:
    v = plan.values
    return float((np.sum(cost.values * v) + 0.5 * gamma * np.sum(v * v)) * plan.grid.cell_area)


def normalize_zero_mean(duals: DualPotentials) -> DualPotentials:
    a2 = duals.alpha2
    r = integrate(a2) / a2.grid.length
    return DualPotentials(duals.alpha1 + r, a2 - r, zero_mean=True)


def initial_duals(prob: QotProblem) -> DualPotentials:
    g = prob.grid
    a1 = np.full(g.gx.n, np.mean(prob.cost.values) + prob.gamma * prob.mass / g.area)
    return DualPotentials(Field(g.gx, a1), Field(g.gy, np.zeros(g.gy.n)))


class _DualSystem:
    """Dense array kernels for one problem instance."""

    def __init__(self, prob: QotProblem):
        g = prob.grid
        self.n1, self.n2 = g.shape
        self.h1, self.h2 = g.gx.h, g.gy.h
        self.c = prob.cost.values
        self.m1 = prob.mu1.values
        self.m2 = prob.mu2.values
        self.gamma = prob.gamma

    def split(self, a):
        return a[: self.n1], a[self.n1:]

    def slack(self, a):
        a1, a2 = self.split(a)
        return a1[:, None] + a2[None, :] - self.c

    def phi(self, a, s=None):
        if s is None:
            s = self.slack(a)
        sp = np.maximum(s, 0.0)
        a1, a2 = self.split(a)
        lin = np.dot(a1, self.m1) * self.h1 + np.dot(a2, self.m2) * self.h2
        return self.gamma * lin - 0.5 * np.sum(sp * sp) * self.h1 * self.h2

    def residual(self, s):
        sp = np.maximum(s, 0.0) / self.gamma
        r1 = sp.sum(axis=1) * self.h2 - self.m1
        r2 = sp.sum(axis=0) * self.h1 - self.m2
        return r1, r2

    def ascent_gradient(self, r1, r2):
        return np.concatenate([-self.gamma * self.h1 * r1, -self.gamma * self.h2 * r2])

    def newton_matrix(self, s):
        """Negative generalized Hessian of the dual objective (symmetric PSD)."""
        sigma = (s > 0).astype(float)
        w = self.h1 * self.h2
        n1, n2 = self.n1, self.n2
        rows = sigma.sum(axis=1)
        cols = sigma.sum(axis=0)
        m = np.zeros((n1 + n2, n1 + n2))
        m[:n1, n1:] = w * sigma
        m[n1:, :n1] = w * sigma.T
        d1 = w * rows
        d2 = w * cols
        # empty active rows/columns: substitute the fully active curvature
        d1[rows == 0] = w * n2
        d2[cols == 0] = w * n1
        idx1 = np.arange(n1)
        idx2 = n1 + np.arange(n2)
        m[idx1, idx1] = d1
        m[idx2, idx2] = d2
        return m, int(np.count_nonzero(rows == 0) + np.count_nonzero(cols == 0))

    def newton_direction(self, s, grad, tikhonov):
        m, _ = self.newton_matrix(s)
        n = self.n1 + self.n2
        scale = np.max(np.sum(np.abs(m), axis=1))
        # residual-scaled shift bounds the step along extra null directions
        # (disconnected active sets) without spoiling local convergence
        eps = max(tikhonov * scale, min(np.max(np.abs(grad)), 1e-3 * scale))
        k = np.zeros((n + 1, n + 1))
        k[:n, :n] = m + eps * np.eye(n)
        # keep sum(alpha2) fixed: removes the constant-shift null direction
        k[n, self.n1:n] = self.h2
        k[self.n1:n, n] = self.h2
        rhs = np.concatenate([grad, [0.0]])
        try:
            sol = np.linalg.solve(k, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(k, rhs, rcond=None)[0]
        return sol[:n]

    def line_maximum(self, a, s, d):
        """Exact maximizer ``t > 0`` of the concave piecewise quadratic ``phi(a + t d)``."""
        d1, d2 = self.split(d)
        ds = (d1[:, None] + d2[None, :]).ravel()
        sv = s.ravel()
        w = self.h1 * self.h2
        lin = self.gamma * (np.dot(d1, self.m1) * self.h1 + np.dot(d2, self.m2) * self.h2) / w
        # phi'(t) / w = lin - sum over active cells of (s + t ds) ds
        active = (sv > 0) | ((sv == 0) & (ds > 0))
        a0 = np.sum(sv[active] * ds[active])
        b0 = np.sum(ds[active] ** 2)
        if lin - a0 <= 0:
            return None
        moving = ds != 0
        with np.errstate(divide="ignore", invalid="ignore"):
            tb = -sv / ds
        ev = moving & (tb > 0)
        times = tb[ev]
        # cells entering (ds > 0) add their terms, cells leaving remove them
        sign = np.where(ds[ev] > 0, 1.0, -1.0)
        order = np.argsort(times, kind="stable")
        times = times[order]
        da = (sign * sv[ev] * ds[ev])[order]
        db = (sign * ds[ev] ** 2)[order]
        acc_a = np.concatenate([[a0], a0 + np.cumsum(da)])
        acc_b = np.concatenate([[b0], b0 + np.cumsum(db)])
        ends = np.concatenate([times, [np.inf]])
        with np.errstate(invalid="ignore"):
            deriv_end = lin - acc_a - acc_b * ends
        hit = np.nonzero((deriv_end <= 0) & (acc_b > 0))[0]
        if hit.size == 0:
            return None
        k = hit[0]
        t = (lin - acc_a[k]) / acc_b[k]
        lo = times[k - 1] if k > 0 else 0.0
        return float(min(max(t, lo), ends[k]))

    def _best_shift(self, b, target):
        """Per row of ``b``, the ``t`` with ``sum_j (t + b_j)_+ = target``."""
        n = b.shape[1]
        srt = -np.sort(-b, axis=1)
        csum = np.cumsum(srt, axis=1)
        # F(-srt_k) = csum_{k-1} - k srt_k is nondecreasing in k
        k = np.arange(1, n)
        below = csum[:, :-1] - k[None, :] * srt[:, 1:] < target[:, None]
        count = 1 + np.sum(below, axis=1)
        rows = np.arange(b.shape[0])
        t = (target - csum[rows, count - 1]) / count
        return np.where(target > 0, t, -srt[:, 0])

    def sweep(self, a):
        """Exact maximization over all row potentials, then all column potentials."""
        a1, a2 = self.split(a)
        a1 = self._best_shift(a2[None, :] - self.c, self.gamma * self.m1 / self.h2)
        a2 = self._best_shift((a1[:, None] - self.c).T, self.gamma * self.m2 / self.h1)
        return np.concatenate([a1, a2])

    def repair(self, a, s):
        """Raise starved rows, then starved columns, to their exact maximizers.

        A line is starved when it has positive target mass but no active
        cell.  Raising a potential only adds active cells, so repairing rows
        cannot starve a column and vice versa; ``None`` if nothing to do.
        """
        act = s > 0
        rows = ~act.any(axis=1) & (self.m1 > 0)
        cols = ~act.any(axis=0) & (self.m2 > 0)
        if not (rows.any() or cols.any()):
            return None
        a1, a2 = (x.copy() for x in self.split(a))
        if rows.any():
            a1[rows] = self._best_shift(a2[None, :] - self.c[rows],
                                        self.gamma * self.m1[rows] / self.h2)
        if cols.any():
            a2[cols] = self._best_shift((a1[:, None] - self.c[:, cols]).T,
                                        self.gamma * self.m2[cols] / self.h1)
        return np.concatenate([a1, a2])


def _pack(duals: DualPotentials) -> np.ndarray:
    return np.concatenate([duals.alpha1.values, duals.alpha2.values])


def solve(prob: QotProblem, opts: SolverOptions | None = None,
          init: DualPotentials | None = None) -> QotSolution:
    """Solve the regularized transport problem; see the module docstring.

    Raises :class:`NonConvergence` (with the best iterate attached) when the
    iteration caps are exhausted and ``opts.raise_on_failure`` is set.
    """
    opts = opts or SolverOptions()
    g = prob.grid
    sysm = _DualSystem(prob)
    start = normalize_zero_mean(init if init is not None else initial_duals(prob))
    if start.alpha1.grid != g.gx or start.alpha2.grid != g.gy:
        raise ValueError("warm start potentials live on different grids")
    a = _pack(start)

    s = sysm.slack(a)
    phi = sysm.phi(a, s)
    history = [phi]
    newton = fallback = 0
    while True:
        r1, r2 = sysm.residual(s)
        res = max(np.max(np.abs(r1)), np.max(np.abs(r2)))
        if res <= opts.tol:
            break
        if newton >= opts.max_newton and fallback >= opts.max_fallback:
            break
        moved = False
        fixed = sysm.repair(a, s)
        if fixed is not None:
            a = fixed
            s = sysm.slack(a)
            phi = max(phi, sysm.phi(a, s))
            r1, r2 = sysm.residual(s)
        if newton < opts.max_newton:
            newton += 1
            d = sysm.newton_direction(s, sysm.ascent_gradient(r1, r2), opts.tikhonov)
            t = sysm.line_maximum(a, s, d) if np.all(np.isfinite(d)) else None
            if t is not None and t > 0:
                trial = a + t * d
                s_new = sysm.slack(trial)
                phi_new = sysm.phi(trial, s_new)
                if phi_new >= phi:
                    a, s, phi = trial, s_new, phi_new
                    history.append(phi)
                    # a full step means the active set settled; otherwise also sweep
                    moved = t >= 0.5
        if not moved:
            if fallback >= opts.max_fallback:
                if newton >= opts.max_newton:
                    break
                continue
            fallback += 1
            trial = sysm.sweep(a)
            s_new = sysm.slack(trial)
            phi_new = sysm.phi(trial, s_new)
            if phi_new < phi - 1e-14 * max(1.0, abs(phi)):
                log.debug("coordinate sweep failed to ascend at residual %.3e", res)
                break
            a, s, phi = trial, s_new, max(phi, phi_new)
            history.append(phi)

    a1, a2 = sysm.split(a)
    duals = normalize_zero_mean(DualPotentials(Field(g.gx, a1), Field(g.gy, a2)))
    plan = plan_from_duals(duals, prob.cost, prob.gamma)
    r1, r2 = dual_residual(duals, prob)
    res = max(lp_norm(r1, math.inf), lp_norm(r2, math.inf))
    sol = QotSolution(
        plan=plan,
        duals=duals,
        marginal_residual=float(res),
        primal_value=primal_objective(plan, prob.cost, prob.gamma),
        dual_value=dual_objective(duals, prob),
        iterations=newton + fallback,
        converged=bool(res <= opts.tol),
        duals_certified=prob.duals_certified,
        newton_steps=newton,
        fallback_steps=fallback,
        dual_history=history,
    )
    if not sol.converged and opts.raise_on_failure:
        raise NonConvergence(
            f"no convergence after {newton} Newton and {fallback} gradient steps "
            f"(residual {res:.3e} > tol {opts.tol:.1e})",
            sol,
        )
    return sol


def with_gamma(prob: QotProblem, gamma: float) -> QotProblem:
    return replace(prob, gamma=gamma)


def energy_identity_residual(sol: QotSolution, prob: QotProblem) -> float:
    """Relative defect of ``gamma ||pi||^2 = sum_i int mu_i a_i - int pi c``."""
    pi = sol.plan
    g = prob.grid
    lhs = prob.gamma * float(np.sum(pi.values**2)) * g.cell_area
    rhs = (float(np.dot(prob.mu1.values, sol.duals.alpha1.values)) * g.gx.h
           + float(np.dot(prob.mu2.values, sol.duals.alpha2.values)) * g.gy.h
           - float(np.sum(pi.values * prob.cost.values)) * g.cell_area)
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def make_problem(grid: Grid2D, cost, mu1, mu2, gamma: float) -> QotProblem:
    """Build a problem from arrays or callables evaluated at cell centers."""
    from .grid import sample

    def as_field(obj, gr):
        if isinstance(obj, Field):
            return obj
        if callable(obj):
            return sample(gr, obj)
        return Field(gr, np.broadcast_to(np.asarray(obj, dtype=float), gr.shape))

    return QotProblem(as_field(cost, grid), as_field(mu1, grid.gx),
                      as_field(mu2, grid.gy), float(gamma))


__all__ = [
    "DualPotentials", "EmptyActiveRow", "InfeasibleMasses", "NonConvergence",
    "QotError", "QotProblem", "QotSolution", "SolverOptions", "dual_objective",
    "dual_residual", "energy_identity_residual", "initial_duals", "make_problem",
    "normalize_zero_mean", "plan_from_duals", "primal_objective", "solve",
    "with_gamma",
]
