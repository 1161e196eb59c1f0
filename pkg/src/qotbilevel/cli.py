"""``qot`` command line interface.

Exit codes: 0 success, 1 a ``check`` failed, 2 configuration/data error,
3 solver non-convergence.  All artifacts go to ``--out-dir``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import (ConfigError, check_keys, field_source, load_config, measure_source,
                        parse_axis, parse_grid2, write_duals, write_field, write_json,
                        write_jsonl, write_measure, write_sparse_plan, read_duals)
from .bilevel import (BilevelConfig, BilevelState, OuterOptions, forward_map,
                      gamma_delta_path, project_simplex, solve_bilevel)
from .grid import Field, Grid2D, lp_norm
from .lp import complementarity_residual, dual_infeasibility, dual_value, solve_lp
from .measures import DiscreteMeasure, MeasureError, mollify_shift, uniform_measure
from .qot import (NonConvergence, QotError, QotProblem, SolverOptions,
                  energy_identity_residual, solve)
from . import verify

log = logging.getLogger("qotbilevel")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NONCONV = 0, 1, 2, 3

SOLVE_KEYS = ("grid", "cost", "mu1", "mu2", "gamma", "tol", "max_newton", "max_fallback",
              "tikhonov", "warm_start_path")
SOLVER_KEYS = ("tol", "max_newton", "max_fallback", "tikhonov")
OUTER_KEYS = ("step0", "shrink", "max_iters", "fd_step", "restarts", "seed",
              "optimize_cost", "cost_batch")
BILEVEL_KEYS = ("grid", "gamma", "delta", "p", "nu", "objective_norm", "cost_ref",
                "mu2_data", "obs_plan", "obs_mask", "obs_mu1", "obs_mu1_mask", "init_mu1",
                "outer", "solver")


def _solver_options(d: dict, where: str, **defaults) -> SolverOptions:
    opts = SolverOptions(**defaults)
    for key in SOLVER_KEYS:
        if key in d:
            setattr(opts, key, type(getattr(opts, key))(d[key]))
    if not opts.tol > 0:
        raise ConfigError(f"{where}.tol must be positive")
    return opts


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved(args, cfg) -> dict:
    return {"command": args.command, "config": cfg, "seed": args.seed}


# --------------------------------------------------------------------------
# solve / check identity


def _load_qot(path):
    cfg, base = load_config(path)
    check_keys(cfg, SOLVE_KEYS, "solve config", required=("grid", "cost", "mu1", "mu2", "gamma"))
    grid = parse_grid2(cfg["grid"])
    cost = field_source(cfg["cost"], grid, base, "cost")
    mu1 = field_source(cfg["mu1"], grid.gx, base, "mu1")
    mu2 = field_source(cfg["mu2"], grid.gy, base, "mu2")
    try:
        prob = QotProblem(cost, mu1, mu2, float(cfg["gamma"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    opts = _solver_options(cfg, "solve config", raise_on_failure=False)
    warm = None
    if cfg.get("warm_start_path"):
        warm = read_duals(base / cfg["warm_start_path"], grid.gx, grid.gy)
    return cfg, prob, opts, warm


def _solve_diagnostics(sol, prob) -> dict:
    diag = sol.diagnostics()
    gk = prob.gamma * sol.primal_value
    diag["gamma"] = prob.gamma
    diag["duality_relation_residual"] = abs(sol.dual_value - gk) / max(abs(gk), 1e-300)
    diag["energy_identity_residual"] = energy_identity_residual(sol, prob)
    diag["plan_min"] = float(sol.plan.values.min())
    return diag


def cmd_solve(args) -> int:
    cfg, prob, opts, warm = _load_qot(args.config)
    sol = solve(prob, opts, init=warm)
    out = _out(args)
    rc = _resolved(args, cfg)
    write_field(out / "plan.csv", sol.plan, rc)
    write_duals(out / "duals.csv", sol.duals.alpha1, sol.duals.alpha2, rc)
    write_json(out / "diagnostics.json", _solve_diagnostics(sol, prob), rc)
    if not sol.converged:
        print(f"error: solver did not converge (residual {sol.marginal_residual:.3e})",
              file=sys.stderr)
        return EXIT_NONCONV
    return EXIT_OK


def cmd_check(args) -> int:
    if args.what != "identity":
        raise ConfigError(f"unknown check {args.what!r}")
    cfg, prob, opts, warm = _load_qot(args.config)
    sol = solve(prob, opts, init=warm)
    res = verify.energy_identity_check(sol, prob)
    ok = bool(sol.converged and res <= args.tol)
    write_json(_out(args) / "identity.json",
               {"energy_identity_residual": res, "tolerance": args.tol, "passed": ok,
                "converged": sol.converged}, _resolved(args, cfg))
    if not sol.converged:
        return EXIT_NONCONV
    return EXIT_OK if ok else EXIT_CHECK


# --------------------------------------------------------------------------
# exact LP


def cmd_exact(args) -> int:
    cfg, base = load_config(args.config)
    check_keys(cfg, ("grid", "cost", "mu1", "mu2"), "exact config",
               required=("grid", "cost", "mu1", "mu2"))
    grid = parse_grid2(cfg["grid"])
    cost = field_source(cfg["cost"], grid, base, "cost")
    mu1 = measure_source(cfg["mu1"], grid.gx, base, "mu1")
    mu2 = measure_source(cfg["mu2"], grid.gy, base, "mu2")
    plan, pot = solve_lp(cost, mu1, mu2)
    out = _out(args)
    rc = _resolved(args, cfg)
    write_sparse_plan(out / "plan_sparse.csv", plan, rc)
    write_duals(out / "potentials.csv", Field(grid.gx, pot.phi), Field(grid.gy, pot.psi), rc)
    write_json(out / "diagnostics.json", {
        "cost_value": plan.cost_value,
        "dual_value": dual_value(pot, mu1, mu2),
        "complementarity_residual": complementarity_residual(plan, pot, cost),
        "dual_infeasibility": dual_infeasibility(pot, cost),
        "support_size": plan.support_size,
    }, rc)
    return EXIT_OK


# --------------------------------------------------------------------------
# mollify


def cmd_mollify(args) -> int:
    cfg, base = load_config(args.config)
    check_keys(cfg, ("grid", "measure", "delta", "kernel"), "mollify config",
               required=("grid", "measure", "delta"))
    if cfg.get("kernel", "bump") != "bump":
        raise ConfigError("only the 'bump' kernel is available")
    grid = parse_axis(cfg["grid"], "grid")
    mu = measure_source(cfg["measure"], grid, base, "measure")
    f = mollify_shift(mu, float(cfg["delta"]))
    out = _out(args)
    rc = _resolved(args, cfg)
    write_field(out / "mollified.csv", f, rc)
    write_json(out / "summary.json", {
        "delta": float(cfg["delta"]),
        "input_mass": mu.total_mass,
        "l1_norm": lp_norm(f, 1),
        "min_value": float(f.values.min()),
        "dilated_grid": {"lo": f.grid.lo, "hi": f.grid.hi, "n": f.grid.n},
    }, rc)
    return EXIT_OK


# --------------------------------------------------------------------------
# bilevel / path


def _parse_bilevel(cfg: dict, base: Path, args, obs_at=None):
    check_keys(cfg, BILEVEL_KEYS + ("schedule",), "bilevel config",
               required=("grid", "gamma", "delta", "cost_ref", "obs_plan"))
    grid = parse_grid2(cfg["grid"])
    cost_ref = field_source(cfg["cost_ref"], grid, base, "cost_ref")
    mu2 = measure_source(cfg.get("mu2_data", 1.0), grid.gy, base, "mu2_data", normalize=True)

    outer_cfg = cfg.get("outer", {})
    check_keys(outer_cfg, OUTER_KEYS, "outer")
    outer = OuterOptions(**{k: type(getattr(OuterOptions(), k))(v) for k, v in outer_cfg.items()})
    if args.seed is not None:
        outer.seed = int(args.seed)
    outer.threads = max(1, int(args.threads))
    solver_cfg = cfg.get("solver", {})
    check_keys(solver_cfg, SOLVER_KEYS, "solver")
    solver = _solver_options(solver_cfg, "solver", tol=1e-11)

    extras = {}
    obs = cfg["obs_plan"]
    if isinstance(obs, dict) and "synthetic" in obs:
        check_keys(obs, ("synthetic",), "obs_plan")
        syn = obs["synthetic"]
        check_keys(syn, ("mu1", "seed", "gamma", "delta"), "obs_plan.synthetic")
        if syn.get("mu1", "random") == "random":
            rng = np.random.default_rng([int(syn.get("seed", 0)), 0xB11E])
            mu_true = DiscreteMeasure(grid.gx, project_simplex(rng.dirichlet(np.ones(grid.gx.n))))
        else:
            mu_true = measure_source(syn["mu1"], grid.gx, base, "obs_plan.synthetic.mu1",
                                     normalize=True)
        g0, d0 = obs_at or (cfg["gamma"], cfg["delta"])
        gen = BilevelConfig(gamma=float(syn.get("gamma", g0)),
                            delta=float(syn.get("delta", d0)), cost_ref=cost_ref,
                            mu2_data=mu2, obs_plan=Field(grid, np.zeros(grid.shape)),
                            solver=solver)
        obs_plan = forward_map(mu_true, cost_ref, gen)
        extras["mu1_true"] = mu_true
    else:
        obs_plan = field_source(obs, grid, base, "obs_plan")

    def mask(key, g):
        if cfg.get(key) is None:
            return None
        return field_source(cfg[key], g, base, key).values != 0

    obs_mu1 = None
    if cfg.get("obs_mu1") is not None:
        obs_mu1 = measure_source(cfg["obs_mu1"], grid.gx, base, "obs_mu1", normalize=True)
    try:
        bc = BilevelConfig(
            gamma=float(cfg["gamma"]), delta=float(cfg["delta"]), cost_ref=cost_ref,
            mu2_data=mu2, obs_plan=obs_plan, obs_mask=mask("obs_mask", grid),
            obs_mu1=obs_mu1, obs_mu1_mask=mask("obs_mu1_mask", grid.gx),
            p=float(cfg.get("p", 3.0)), nu=float(cfg.get("nu", 0.0)),
            objective_norm=cfg.get("objective_norm", "L2"), outer=outer, solver=solver,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    init = None
    if cfg.get("init_mu1") is not None:
        mu0 = measure_source(cfg["init_mu1"], grid.gx, base, "init_mu1", normalize=True)
        init = BilevelState(mu1=mu0, cost=cost_ref)
    return bc, init, extras


def _write_state(out: Path, state: BilevelState, rc, prefix=""):
    write_measure(out / f"{prefix}mu1.csv", state.mu1, rc)
    write_field(out / f"{prefix}cost.csv", state.cost, rc)
    if state.plan is not None:
        write_field(out / f"{prefix}plan.csv", state.plan, rc)


def cmd_bilevel(args) -> int:
    cfg, base = load_config(args.config)
    bc, init, extras = _parse_bilevel(cfg, base, args)
    if "schedule" in cfg:
        raise ConfigError("'schedule' belongs to the path command")
    state = solve_bilevel(bc, init)
    out = _out(args)
    rc = _resolved(args, cfg)
    write_jsonl(out / "history.jsonl", state.log, rc)
    _write_state(out, state, rc)
    summary = state.summary()
    summary["mass_bound"] = 1.0 + bc.delta
    summary["mass_violations"] = getattr(state, "mass_violations", 0)
    summary["history"] = state.history
    if "mu1_true" in extras:
        write_measure(out / "mu1_true.csv", extras["mu1_true"], rc)
        summary["tv_to_truth"] = float(np.abs(state.mu1.weights - extras["mu1_true"].weights).sum())
    write_json(out / "summary.json", summary, rc)
    return EXIT_OK


def cmd_path(args) -> int:
    cfg, base = load_config(args.config)
    if "schedule" not in cfg:
        raise ConfigError("path config needs a 'schedule' list of [gamma, delta] pairs")
    sched = cfg["schedule"]
    if not isinstance(sched, list) or not all(isinstance(s, list) and len(s) == 2 for s in sched):
        raise ConfigError("schedule must be a list of [gamma, delta] pairs")
    # synthetic observations default to the last (gamma, delta) of the schedule
    bc, init, _ = _parse_bilevel(cfg, base, args, obs_at=sched[-1] if sched else None)
    try:
        states = gamma_delta_path(bc, sched, init)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out(args)
    rc = _resolved(args, cfg)
    records = []
    steps = []
    for k, st in enumerate(states):
        records += [dict(r, schedule_index=k) for r in st.log]
        steps.append({"gamma": st.gamma, "delta": st.delta, "J": st.J_value,
                      "Jgamma": st.Jgamma_value, "cost_distance_w1p": st.cost_distance,
                      "max_trial_mass": st.max_trial_mass})
    write_jsonl(out / "history.jsonl", records, rc)
    _write_state(out, states[-1], rc)
    write_json(out / "path.json", {"steps": steps}, rc)
    return EXIT_OK


# --------------------------------------------------------------------------
# verification commands


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_counterexample(args) -> int:
    try:
        report = verify.run_counterexample(_int_list(args.n), args.resolution, args.gamma,
                                           stability_resolutions=_int_list(args.stability))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rc = _resolved(args, {"n": args.n, "resolution": args.resolution, "gamma": args.gamma,
                          "stability": args.stability})
    write_json(_out(args) / "counterexample.json", report, rc)
    return EXIT_OK


def cmd_probe(args) -> int:
    seed = 0 if args.seed is None else int(args.seed)
    params = {"kind": args.kind, "trials": args.trials, "n": args.n, "gamma": args.gamma}
    if args.kind == "holder":
        params["scales"] = args.scales
        rep = verify.holder_probe(args.trials, _float_list(args.scales), seed=seed,
                                  family=verify.InstanceFamily(n=args.n or 32, gamma=args.gamma),
                                  threads=args.threads).to_dict()
    elif args.kind == "dualbounds":
        rep = verify.dual_bound_probe(args.trials, seed=seed,
                                      family=verify.InstanceFamily(n=args.n or 16, gamma=args.gamma),
                                      threads=args.threads).to_dict()
    else:
        n = args.n or 40
        params["deltas"] = args.deltas
        mu1, mu2 = _stability_target(args.target, n)
        rep = verify.stability_probe(mu1, mu2, _float_list(args.deltas))
        params["target"] = args.target
    write_json(_out(args) / f"probe_{args.kind}.json", rep, _resolved(args, params))
    return EXIT_OK


def _stability_target(name: str, n: int):
    from .grid import build_grid

    g = build_grid(0.0, 1.0, n)
    if name == "uniform":
        return uniform_measure(g), uniform_measure(g)
    if name == "two-atom":
        def atoms(xs):
            w = np.zeros(n)
            for x in xs:
                w[min(int(x * n), n - 1)] += 0.5
            return DiscreteMeasure(g, w)
        return atoms([0.25, 0.75]), atoms([0.4, 0.6])
    raise ConfigError(f"unknown stability target {name!r}")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, suppress):
        # subcommand copies must not clobber values given before the subcommand
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--seed", type=int, default=d(None), help="random seed")
        parser.add_argument("--out-dir", default=d("."), help="directory for artifacts")
        parser.add_argument("--threads", type=int, default=d(1),
                            help="worker threads for probes and trial evaluations")
        parser.add_argument("-v", "--verbose", action="store_true", default=d(False))

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, suppress=True)
    p = argparse.ArgumentParser(prog="qot",
                                description="Quadratically regularized optimal transport tools")
    global_flags(p, suppress=False)
    p.add_argument("--version", action="version", version=f"qotbilevel {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", parents=[common], help="solve the regularized problem")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("exact", parents=[common], help="exact transport LP")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_exact)

    s = sub.add_parser("mollify", parents=[common], help="mollify and shift a measure")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_mollify)

    s = sub.add_parser("bilevel", parents=[common], help="regularized bilevel problem")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_bilevel)

    s = sub.add_parser("path", parents=[common], help="bilevel solves along a (gamma, delta) schedule")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_path)

    s = sub.add_parser("counterexample", parents=[common], help="oscillating counterexample")
    s.add_argument("--n", default="1,2,4,8", help="comma separated oscillation frequencies")
    s.add_argument("--resolution", type=int, default=512)
    s.add_argument("--gamma", type=float, default=1.0)
    s.add_argument("--stability", default="256,512", help="resolutions for the gap drift")
    s.set_defaults(func=cmd_counterexample)

    s = sub.add_parser("probe", parents=[common], help="empirical probes")
    s.add_argument("kind", choices=("holder", "dualbounds", "stability"))
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--scales", default="1e-1,1e-2,1e-3,1e-4,1e-5")
    s.add_argument("--deltas", default="0.2,0.1,0.05")
    s.add_argument("--n", type=int, default=None, help="cells per axis")
    s.add_argument("--gamma", type=float, default=1.0)
    s.add_argument("--target", default="two-atom", choices=("uniform", "two-atom"))
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("check", parents=[common], help="consistency checks")
    s.add_argument("what", choices=("identity",))
    s.add_argument("--config", required=True)
    s.add_argument("--tol", type=float, default=1e-8)
    s.set_defaults(func=cmd_check)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    except (ConfigError, MeasureError, QotError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
