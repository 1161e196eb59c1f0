import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_instance
from oracles import dual_maximum, qp_by_enumeration
from qotbilevel.grid import Field, build_grid, lp_norm, product_grid
from qotbilevel.measures import marginals
from qotbilevel.qot import (DualPotentials, InfeasibleMasses, NonConvergence, QotProblem,
                            SolverOptions, dual_objective, dual_residual, energy_identity_residual,
                            initial_duals, make_problem, normalize_zero_mean, plan_from_duals,
                            primal_objective, solve, with_gamma)


def uniform_problem(gamma=1.0, n=8):
    g1 = build_grid(0, 1, n)
    return make_problem(product_grid(g1, g1), 0.0, 1.0, 1.0, gamma)


def two_by_two(gamma=1.0):
    g1 = build_grid(0, 2, 2)  # unit cells
    return make_problem(product_grid(g1, g1), [[0, 1], [1, 0]], 0.5, 0.5, gamma)


def duals_of(prob, a1, a2):
    return DualPotentials(Field(prob.grid.gx, a1), Field(prob.grid.gy, a2))


def test_plan_from_duals_examples():
    prob = uniform_problem(gamma=2.5)
    pi = plan_from_duals(duals_of(prob, np.full(8, 2.5), np.zeros(8)), prob.cost, 2.5)
    np.testing.assert_allclose(pi.values, 1.0)
    c = Field(prob.grid, np.ones(prob.grid.shape))
    assert not plan_from_duals(duals_of(prob, np.full(8, 0.3), np.full(8, 0.7)), c, 1.0).values.any()
    p2 = two_by_two()
    pi = plan_from_duals(duals_of(p2, [0.5, 0.5], [0, 0]), p2.cost, 1.0)
    np.testing.assert_array_equal(pi.values, [[0.5, 0], [0, 0.5]])


def test_dual_residual_examples():
    p2 = two_by_two()
    r1, r2 = dual_residual(duals_of(p2, [0.5, 0.5], [0, 0]), p2)
    assert max(np.abs(r1.values).max(), np.abs(r2.values).max()) <= 1e-14
    g1 = build_grid(0, 1, 4)
    prob = make_problem(product_grid(g1, g1), lambda x1, x2: (x1 - x2) ** 2,
                        [1, 2, 0.5, 0.5], [0.5, 1, 1.5, 1], 1.0)
    r1, r2 = dual_residual(duals_of(prob, np.zeros(4), np.zeros(4)), prob)
    np.testing.assert_allclose(r1.values, -prob.mu1.values)
    np.testing.assert_allclose(r2.values, -prob.mu2.values)
    u = uniform_problem(gamma=0.3)
    r1, r2 = dual_residual(duals_of(u, np.full(8, 0.3), np.zeros(8)), u)
    assert np.abs(r1.values).max() <= 1e-15 and np.abs(r2.values).max() <= 1e-15


def test_dual_objective_examples():
    g1 = build_grid(0, 1, 4)
    prob = make_problem(product_grid(g1, g1), lambda x1, x2: 1 + x1 * x2, 1.0, 1.0, 1.0)
    assert dual_objective(duals_of(prob, np.zeros(4), np.zeros(4)), prob) == 0.0
    for gamma in (0.5, 1.0, 3.0):
        u = uniform_problem(gamma)
        assert dual_objective(duals_of(u, np.full(8, gamma), np.zeros(8)), u) == pytest.approx(gamma**2 / 2)
    p2 = two_by_two()
    d = duals_of(p2, [0.5, 0.5], [0, 0])
    k = primal_objective(plan_from_duals(d, p2.cost, 1.0), p2.cost, 1.0)
    assert dual_objective(d, p2) == pytest.approx(1.0 * k, abs=1e-15)


def test_primal_objective_examples():
    u = uniform_problem(gamma=1.7)
    assert primal_objective(Field(u.grid, np.zeros(u.grid.shape)), u.cost, 1.7) == 0.0
    assert primal_objective(Field(u.grid, np.ones(u.grid.shape)), u.cost, 1.7) == pytest.approx(1.7 / 2)
    p2 = two_by_two()
    assert primal_objective(Field(p2.grid, [[0.5, 0], [0, 0.5]]), p2.cost, 1.0) == pytest.approx(0.25)


def test_normalize_zero_mean_examples():
    u = uniform_problem()
    z = normalize_zero_mean(duals_of(u, np.full(8, 1.0), np.full(8, 5.0)))
    np.testing.assert_allclose(z.alpha2.values, 0.0, atol=1e-15)
    np.testing.assert_allclose(z.alpha1.values, 6.0)
    assert z.zero_mean
    a2 = np.array([1, -1, 2, -2, 0.5, -0.5, 0, 0.0])
    z = normalize_zero_mean(duals_of(u, np.arange(8.0), a2))
    np.testing.assert_array_equal(z.alpha1.values, np.arange(8.0))
    np.testing.assert_array_equal(z.alpha2.values, a2)


@settings(max_examples=60, deadline=None)
@given(arrays(float, 5, elements=st.floats(-50, 50)), arrays(float, 3, elements=st.floats(-50, 50)))
def test_normalize_zero_mean_preserves_plan(a1, a2):
    g = product_grid(build_grid(0, 2, 5), build_grid(-1, 0.5, 3))
    c = Field(g, np.add.outer(np.linspace(0, 1, 5), np.linspace(1, 0, 3)) ** 2)
    d = DualPotentials(Field(g.gx, a1), Field(g.gy, a2))
    z = normalize_zero_mean(d)
    assert abs(np.sum(z.alpha2.values) * g.gy.h) <= 1e-12 * (1 + np.abs(a2).max())
    scale = 1 + np.abs(a1).max() + np.abs(a2).max()
    np.testing.assert_allclose(plan_from_duals(z, c, 0.7).values,
                               plan_from_duals(d, c, 0.7).values, rtol=0, atol=1e-13 * scale)


def test_solve_uniform_instance():
    sol = solve(uniform_problem(), SolverOptions(tol=1e-12))
    np.testing.assert_allclose(sol.plan.values, 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(sol.duals.alpha1.values, 1.0, atol=1e-12)
    np.testing.assert_allclose(sol.duals.alpha2.values, 0.0, atol=1e-12)
    assert sol.marginal_residual <= 1e-12 and sol.converged


def test_solve_two_by_two_matches_enumeration():
    p2 = two_by_two()
    sol = solve(p2, SolverOptions(tol=1e-13))
    np.testing.assert_allclose(sol.plan.values, [[0.5, 0], [0, 0.5]], atol=1e-13)
    pi, k = qp_by_enumeration(p2.cost.values, p2.mu1.values, p2.mu2.values, 1.0, 1.0, 1.0)
    np.testing.assert_allclose(pi, [[0.5, 0], [0, 0.5]], atol=1e-14)
    assert k == pytest.approx(0.25)
    assert sol.primal_value == pytest.approx(0.25, abs=1e-13)
    assert sol.dual_value == pytest.approx(0.25, abs=1e-13)
    assert energy_identity_residual(sol, p2) <= 1e-12


@pytest.mark.parametrize("seed", range(12))
def test_solve_matches_brute_force_qp(seed):
    rng = np.random.default_rng(seed)
    n1, n2 = rng.integers(1, 4, size=2)
    prob = random_instance(rng, n1, n2)
    sol = solve(prob, SolverOptions(tol=1e-12))
    c, m1, m2 = prob.cost.values, prob.mu1.values, prob.mu2.values
    h1, h2 = prob.grid.gx.h, prob.grid.gy.h
    pi, k = qp_by_enumeration(c, m1, m2, h1, h2, prob.gamma)
    np.testing.assert_allclose(sol.plan.values, pi, rtol=0, atol=1e-9 * (1 + np.abs(pi).max()))
    assert sol.primal_value == pytest.approx(k, rel=1e-9)
    # the dual maximum equals gamma times the primal minimum, not the minimum itself
    phi_max = dual_maximum(c, m1, m2, h1, h2, prob.gamma)
    assert phi_max == pytest.approx(prob.gamma * k, rel=1e-8)
    assert sol.dual_value == pytest.approx(phi_max, rel=1e-8)


def test_cost_shift_shifts_alpha1_only():
    rng = np.random.default_rng(7)
    prob = random_instance(rng, 9, 6, gamma=0.2)
    r = 3.25
    shifted = QotProblem(prob.cost + r, prob.mu1, prob.mu2, prob.gamma)
    opts = SolverOptions(tol=1e-12)
    a, b = solve(prob, opts), solve(shifted, opts)
    assert np.max(np.abs(a.plan.values - b.plan.values)) <= 1e-10
    np.testing.assert_allclose(b.duals.alpha1.values - a.duals.alpha1.values, r, atol=1e-9)
    np.testing.assert_allclose(b.duals.alpha2.values, a.duals.alpha2.values, atol=1e-9)


def test_uniqueness_from_different_starts():
    rng = np.random.default_rng(3)
    prob = random_instance(rng, 12, 10, gamma=0.05)
    opts = SolverOptions(tol=1e-12)
    a = solve(prob, opts)
    g = prob.grid
    init = DualPotentials(Field(g.gx, rng.normal(size=g.gx.n) * 3),
                          Field(g.gy, rng.normal(size=g.gy.n) * 3))
    b = solve(prob, opts, init=init)
    assert lp_norm(a.plan - b.plan, 2) <= 1e-7


@pytest.mark.parametrize("seed", range(5))
def test_invariants_on_random_instances(seed):
    rng = np.random.default_rng(100 + seed)
    prob = random_instance(rng, int(rng.integers(5, 40)), int(rng.integers(5, 40)))
    sol = solve(prob)
    assert sol.converged and sol.marginal_residual <= 1e-9
    m1, m2 = marginals(sol.plan)
    assert lp_norm(m1 - prob.mu1, math.inf) <= 1e-9
    assert lp_norm(m2 - prob.mu2, math.inf) <= 1e-9
    assert sol.plan.values.min() >= 0.0
    assert energy_identity_residual(sol, prob) <= 1e-8
    assert sol.dual_value == pytest.approx(prob.gamma * sol.primal_value, rel=1e-8)
    assert all(b >= a for a, b in zip(sol.dual_history, sol.dual_history[1:]))
    assert abs(np.sum(sol.duals.alpha2.values) * prob.grid.gy.h) <= 1e-10


def test_small_gamma_converges():
    rng = np.random.default_rng(11)
    prob = random_instance(rng, 16, 16, gamma=1e-4)
    sol = solve(prob)
    assert sol.converged and sol.plan.values.min() == 0.0


def test_plan_norm_is_bounded_by_data_over_a_family():
    ratios = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        prob = random_instance(rng, 12, 12, gamma=1.0)
        sol = solve(prob)
        ratios.append(lp_norm(sol.plan, 2) / (lp_norm(prob.mu1, 2) * lp_norm(prob.mu2, 2)
                                              + lp_norm(prob.cost, 2)))
    assert max(ratios) < 5.0


def test_zero_marginal_cells_are_reported_uncertified():
    g = product_grid(build_grid(0, 1, 4), build_grid(0, 1, 4))
    prob = make_problem(g, lambda x1, x2: (x1 - x2) ** 2, [0, 2, 1, 1], [1, 1, 1, 1], 1.0)
    assert not prob.duals_certified
    sol = solve(prob)
    assert sol.converged and not sol.duals_certified
    assert np.abs(sol.plan.values[0]).max() <= 1e-9


def test_problem_validation():
    g = product_grid(build_grid(0, 1, 3), build_grid(0, 1, 3))
    with pytest.raises(InfeasibleMasses):
        make_problem(g, 0.0, 1.0, 2.0, 1.0)
    with pytest.raises(InfeasibleMasses):
        make_problem(g, 0.0, [1, -1, 3], 1.0, 1.0)
    with pytest.raises(ValueError):
        make_problem(g, 0.0, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        QotProblem(Field(g.gx, np.ones(3)), Field(g.gx, np.ones(3)), Field(g.gx, np.ones(3)), 1.0)


def test_nonconvergence_carries_best_iterate():
    rng = np.random.default_rng(5)
    prob = random_instance(rng, 20, 20, gamma=1e-3)
    with pytest.raises(NonConvergence) as info:
        solve(prob, SolverOptions(max_newton=1, max_fallback=1))
    assert info.value.solution is not None and not info.value.solution.converged
    sol = solve(prob, SolverOptions(max_newton=1, max_fallback=1, raise_on_failure=False))
    assert not sol.converged and sol.iterations == 2


def test_warm_start_is_faster_and_identical():
    rng = np.random.default_rng(9)
    prob = random_instance(rng, 30, 25, gamma=0.1)
    cold = solve(prob, SolverOptions(tol=1e-12))
    warm = solve(with_gamma(prob, 0.1), SolverOptions(tol=1e-12), init=cold.duals)
    assert warm.iterations == 0
    assert lp_norm(warm.plan - cold.plan, math.inf) <= 1e-12


def test_initial_duals_have_positive_slack_on_average():
    rng = np.random.default_rng(1)
    prob = random_instance(rng, 6, 7)
    d = initial_duals(prob)
    assert np.all(d.alpha2.values == 0)
    assert plan_from_duals(d, prob.cost, prob.gamma).values.sum() > 0


@settings(max_examples=60, deadline=None)
@given(arrays(float, (4, 6), elements=st.floats(-5, 5)),
       arrays(float, 4, elements=st.floats(0, 10)))
def test_best_shift_solves_the_line_equation(b, target):
    from qotbilevel.qot import _DualSystem

    t = _DualSystem._best_shift(None, b, target)
    got = np.maximum(t[:, None] + b, 0).sum(axis=1)
    np.testing.assert_allclose(got[target > 0], target[target > 0], rtol=1e-12, atol=1e-12)
    # zero target: the largest entry sits exactly on the kink
    assert np.all(np.max(t[:, None] + b, axis=1)[target == 0] == 0)


@pytest.mark.parametrize("seed", range(6))
def test_line_maximum_beats_dense_sampling(seed):
    from qotbilevel.qot import _DualSystem, _pack

    rng = np.random.default_rng(seed)
    prob = random_instance(rng, 7, 5, gamma=0.3)
    sysm = _DualSystem(prob)
    a = _pack(initial_duals(prob)) + rng.normal(size=12)
    s = sysm.slack(a)
    r1, r2 = sysm.residual(s)
    d = sysm.ascent_gradient(r1, r2) * 50
    t = sysm.line_maximum(a, s, d)
    ts = np.linspace(0, 4 * t, 4001)
    vals = [sysm.phi(a + x * d) for x in ts]
    best = sysm.phi(a + t * d)
    assert best >= max(vals) - 1e-12 * abs(best)
    eps = 1e-7 * t
    assert best >= sysm.phi(a + (t + eps) * d) and best >= sysm.phi(a + (t - eps) * d)


def test_coordinate_sweep_ascends():
    from qotbilevel.qot import _DualSystem, _pack

    rng = np.random.default_rng(4)
    prob = random_instance(rng, 9, 11)
    sysm = _DualSystem(prob)
    a = _pack(initial_duals(prob))
    vals = [sysm.phi(a)]
    for _ in range(5):
        a = sysm.sweep(a)
        vals.append(sysm.phi(a))
    assert all(y >= x - 1e-14 * abs(x) for x, y in zip(vals, vals[1:]))
    # after a sweep the column equations hold exactly
    _, r2 = sysm.residual(sysm.slack(a))
    assert np.abs(r2).max() <= 1e-12
