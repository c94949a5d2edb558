"""Command-line entry point: ``condemp <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np


def _domain_from_args(args, base=None):
    dom = dict(base or {"kind": "interval", "length": 1.0, "potential": None})
    if getattr(args, "box", None):
        dom = {"kind": "box", "lengths": [float(v) for v in args.box.split(",")]}
    if getattr(args, "length", None) is not None:
        dom = {"kind": "interval", "length": args.length, "potential": dom.get("potential")}
    if getattr(args, "potential", None) is not None:
        if dom["kind"] != "interval":
            raise SystemExit("--potential only applies to an interval")
        dom["potential"] = args.potential
    return dom


def _add_domain(p):
    g = p.add_argument_group("domain")
    g.add_argument("--length", type=float, help="interval length")
    g.add_argument("--potential", help="potential V(x) as a numpy expression in x")
    g.add_argument("--box", help="comma-separated box side lengths")


def _add_experiment(p):
    p.add_argument("--config", help="JSON experiment config")
    _add_domain(p)
    p.add_argument("--M", type=int, help="number of retained modes")
    p.add_argument("--t", type=float, nargs="+", dest="t_list", help="observation horizons")
    p.add_argument("--T", type=float, nargs="+", dest="T_list", help="conditioning horizons (paired with --t)")
    p.add_argument("--N", type=int, help="replicas per horizon")
    p.add_argument("--estimator", choices=["h_importance", "rejection"])
    p.add_argument("--alpha", type=float, help="smoothing schedule r = t^-alpha")
    p.add_argument("--r", type=float, help="fixed smoothing time")
    p.add_argument("--ot-method", choices=["auto", "quantile", "lp", "sinkhorn", "grid"])
    p.add_argument("--eps", type=float, help="Sinkhorn regularisation")
    p.add_argument("--n-ref", type=int, help="reference points for mu_0")
    p.add_argument("--n-atoms", type=int, help="thin path measures to this many atoms")
    p.add_argument("--grid", type=int, help="cells per axis for the grid method")
    p.add_argument("--h", type=float, help="base time step")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--output", help="output directory")


def _experiment_config(args):
    from .harness import ExperimentConfig

    d = ExperimentConfig().to_dict()
    if args.config:
        with open(args.config) as fh:
            d.update(json.load(fh))
    if any(getattr(args, k, None) is not None for k in ("length", "box", "potential")):
        d["domain"] = _domain_from_args(args, d["domain"])
    for key in ("M", "N", "estimator", "seed", "workers", "output"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if args.t_list is not None:
        d["t_list"] = args.t_list
        if args.T_list is None and (not args.config or "T_list" not in d or len(d["T_list"]) != len(args.t_list)):
            d["T_list"] = list(args.t_list)
    if args.T_list is not None:
        d["T_list"] = args.T_list
    if args.alpha is not None:
        d["smoothing"] = {"mode": "schedule", "alpha": args.alpha}
    if args.r is not None:
        d["smoothing"] = {"mode": "fixed", "r": args.r}
    ot = dict(d.get("ot", {}))
    for flag, key in (("ot_method", "method"), ("eps", "eps"), ("n_ref", "n_ref"), ("n_atoms", "n_atoms"),
                      ("grid", "grid")):
        v = getattr(args, flag, None)
        if v is not None:
            ot[key] = v
    d["ot"] = ot
    if args.h is not None:
        d["sde"] = dict(d.get("sde", {}), h=args.h)
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_eigen(args):
    from .harness import build_eigensystem
    from .spectral import limit_constant

    E = build_eigensystem(_domain_from_args(args), args.M)
    out = {"eigenvalues": [float(v) for v in E.eigenvalues[: args.show]], "lambda0": E.lambda0}
    if E.n_modes >= 2:
        lc = limit_constant(E)
        out["limit_constant"] = {"value": lc.value, "tail_bound": lc.tail_bound, "divergent": lc.divergent}
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(E.to_json(indent=2))
    print(json.dumps(out, indent=2))
    return 0


def cmd_simulate(args):
    from .diffusion import SdeConfig, simulate_h_path, simulate_killed_path, write_path_csv
    from .harness import build_eigensystem

    E = build_eigensystem(_domain_from_args(args), args.M)
    cfg = SdeConfig(h=args.h)
    init = args.x0 if args.x0 is not None else "ground"
    if args.dump_paths:
        os.makedirs(args.dump_paths, exist_ok=True)
    alive, weights = 0, []
    for i in range(args.N):
        if args.process == "killed":
            p = simulate_killed_path(E, init, args.T, cfg, args.seed, i, record=args.T if args.dump_paths else 0)
        else:
            p = simulate_h_path(E, init, args.T, cfg, args.seed, i, record=args.T if args.dump_paths else 0)
            if p.survived:
                weights.append(float(np.exp(-E.log_phi0(p.final)[0])))
        alive += p.survived
        if args.dump_paths:
            write_path_csv(p, os.path.join(args.dump_paths, f"path_{i:06d}.csv"), E)
    summary = {"process": args.process, "N": args.N, "T": args.T, "completed": alive}
    if args.process == "killed":
        summary["survival_fraction"] = alive / args.N
    elif weights:
        w = np.asarray(weights)
        summary["ess"] = float(w.sum() ** 2 / (w ** 2).sum())
    print(json.dumps(summary, indent=2))
    return 0


def _run_experiment(args):
    from .harness import run_convergence_experiment, write_results

    cfg = _experiment_config(args)

    def progress(a):
        print(f"t={a['t']:g} T={a['T']:g}  t*mean(W2^2)={a['t_times_mean']:.6g}  "
              f"se={a['t'] * a['se_w2sq']:.3g}  failures={a['n_failures']}/{a['n_replicas']}", flush=True)

    res = run_convergence_experiment(cfg, progress=progress)
    if cfg.output:
        write_results(res, cfg.output)
    return cfg, res


def cmd_converge(args):
    try:
        _, res = _run_experiment(args)
    except RuntimeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    lc = res.metadata.get("limit_constant")
    if lc:
        print(f"limit constant {lc['value']:.6g} (tail <= {lc['tail_bound']:.2g})")
    return 0 if res.failure_fraction < 0.5 else 1


def cmd_rates(args):
    from .harness import build_eigensystem, run_convergence_experiment, run_rate_sweep, write_results

    cfg = _experiment_config(args)
    E = build_eigensystem(cfg.domain, cfg.M)
    try:
        res = run_convergence_experiment(cfg, E)
    except RuntimeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    if cfg.output:
        write_results(res, cfg.output)
    fit, _ = run_rate_sweep(cfg, model=args.model, E=E, result=res)
    print(json.dumps({
        "model": fit.model, "slope": fit.slope, "ci": list(fit.ci), "r2": fit.r2, "aic": fit.aic,
        "alternatives": fit.alternatives,
    }, indent=2, default=float))
    return 0 if res.failure_fraction < 0.5 else 1


def cmd_bismut_check(args):
    from .diffusion import SdeConfig, bismut_gradient
    from .spectral import solve_interval_eigensystem

    E = solve_interval_eigensystem(1.0, None, 64)
    g = 3 * np.pi ** 2
    exact = -2 * np.pi * math.sin(np.pi * args.x) * math.exp(-g * args.t)
    est, se = bismut_gradient(E, lambda x: 2 * np.cos(np.pi * x[:, 0]), args.t, [args.x], N=args.N,
                              cfg=SdeConfig(h=args.h), seed=args.seed, workers=args.workers)
    ok = abs(est[0] - exact) <= 3 * se[0]
    print(json.dumps({"estimate": float(est[0]), "se": float(se[0]), "exact": exact, "within_3se": bool(ok)},
                     indent=2))
    return 0 if ok else 1


def cmd_ot_selftest(args):
    from .transport import DiscreteMeasure, exact_discrete_ot, sinkhorn_w2, w2_1d_exact

    gen = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.instances):
        n, m = gen.integers(1, 65, size=2)
        a = DiscreteMeasure(gen.random(n), gen.dirichlet(np.ones(n)))
        b = DiscreteMeasure(gen.random(m), gen.dirichlet(np.ones(m)))
        worst = max(worst, abs(w2_1d_exact(a, b).cost - exact_discrete_ot(a, b).cost))
    rel = []
    for _ in range(args.sinkhorn_instances):
        shift = gen.uniform(0.2, 0.4, size=2)
        a = DiscreteMeasure(gen.normal(0.5 - shift / 2, 0.1, (400, 2)), np.full(400, 1 / 400))
        b = DiscreteMeasure(gen.normal(0.5 + shift / 2, 0.1, (400, 2)), np.full(400, 1 / 400))
        lp = exact_discrete_ot(a, b).cost
        sk = sinkhorn_w2(a, b, diameter2=2.0)
        rel.append(abs(sk.cost - lp) / lp)
    ok = worst <= 1e-10 and max(rel, default=0.0) <= 0.02
    print(json.dumps({"max_1d_vs_lp": worst, "max_rel_sinkhorn_vs_lp": max(rel, default=0.0), "ok": ok}, indent=2))
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="condemp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("eigen", help="print the spectrum and the limit constant")
    _add_domain(q)
    q.add_argument("--M", type=int, default=256)
    q.add_argument("--show", type=int, default=10)
    q.add_argument("--json", help="write the eigen-system to this file")
    q.set_defaults(func=cmd_eigen)

    q = sub.add_parser("simulate", help="simulate killed or conditioned paths")
    _add_domain(q)
    q.add_argument("--process", choices=["killed", "h"], default="h")
    q.add_argument("--M", type=int, default=64)
    q.add_argument("--T", type=float, default=1.0)
    q.add_argument("--N", type=int, default=100)
    q.add_argument("--h", type=float, default=1e-3)
    q.add_argument("--x0", type=float, nargs="+", help="starting point (default: mu_0)")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--dump-paths", help="directory for per-replica path CSVs")
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("converge", help="t * E[W2^2 | T < tau] against the limit constant")
    _add_experiment(q)
    q.set_defaults(func=cmd_converge)

    q = sub.add_parser("rates", help="decay rate of E[W2^2 | T < tau] over several horizons")
    _add_experiment(q)
    q.add_argument("--model", choices=["power", "power_log"], help="force a model (default: AIC choice)")
    q.set_defaults(func=cmd_rates)

    q = sub.add_parser("bismut-check", help="Bismut gradient against the spectral value on the unit interval")
    q.add_argument("--x", type=float, default=0.5)
    q.add_argument("--t", type=float, default=0.2)
    q.add_argument("--N", type=int, default=100000)
    q.add_argument("--h", type=float, default=1e-3)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--workers", type=int, default=1)
    q.set_defaults(func=cmd_bismut_check)

    q = sub.add_parser("ot-selftest", help="cross-check the transport solvers")
    q.add_argument("--instances", type=int, default=200)
    q.add_argument("--sinkhorn-instances", type=int, default=5)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_ot_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
