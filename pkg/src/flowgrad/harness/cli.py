"""``flowgrad`` command line interface.

Subcommands: run, flow, estimate, verify, sweep, report.  Exit status is 0
when every requested check passes, 1 when a check fails and 2 for unusable
input (schema violations name the offending field).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _print_config_error(exc) -> int:
    print("configuration error:", file=sys.stderr)
    for msg in exc.errors:
        print(f"  {msg}", file=sys.stderr)
    return EXIT_USAGE


def cmd_run(args) -> int:
    from .config import ConfigError, load_scenario
    from .runner import run_scenario

    try:
        scenario = load_scenario(args.config)
    except ConfigError as exc:
        return _print_config_error(exc)
    run_dir, report = run_scenario(scenario, args.out, force=args.force)
    print(f"run directory: {run_dir}")
    for i, est in enumerate(report.get("estimates", [])):
        res = est["result"]
        print(f"{'PASS' if est['passed'] else 'FAIL'}  estimate[{i}] "
              f"{np.round(res['estimate'], 6).tolist()} +/- {np.round(res['se'], 6).tolist()}")
    for a in report.get("audits", []):
        state = "INVALID" if not a["valid"] else ("PASS" if a["passed"] else "FAIL")
        print(f"{state}  audit {a['tag']}  C* = {a['c_star']}")
    for i, m in enumerate(report.get("martingale", [])):
        print(f"{'PASS' if m['passed'] else 'FAIL'}  martingale[{i}]")
    if "sweep" in report:
        sw = report["sweep"]
        print(f"{'PASS' if sw['passed'] else 'FAIL'}  sweep slope {sw['slope']:.3f}")
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_flow(args) -> int:
    from ..flows import FlowError, run_flow
    from .config import ConfigError, flow_config_from, load_flow_table

    try:
        table = load_flow_table(args.config)
        cfg = flow_config_from(table)
    except ConfigError as exc:
        return _print_config_error(exc)
    except (TypeError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        history = run_flow(cfg)
    except FlowError as exc:
        print(f"flow failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = history.save(args.out)
    residual = history.meta.get("residual")
    print(f"wrote {out} ({len(history.times)} snapshots, residual {residual:.3g})")
    return EXIT_OK


def cmd_estimate(args) -> int:
    from ..estimator import (
        make_coefficients,
        run_derivative_estimate,
        run_second_order_estimate,
    )
    from ..flows import FlowHistory
    from .runner import backward_history, dump_json

    history = FlowHistory.load(args.history)
    back = backward_history(history)
    coeffs = make_coefficients(back, order=args.order)
    V = np.array(args.v, dtype=float)
    dt = args.dt if args.dt is not None else back.stride
    kwargs = dict(mode=args.mode, n_paths=args.paths, dt=dt, seed=args.seed, r=args.r)
    if args.order == 1:
        res = run_derivative_estimate(back, coeffs, args.x0, V, **kwargs)
    else:
        res = run_second_order_estimate(back, coeffs, args.x0, V, **kwargs)
    dump_json(args.out, res.to_dict())
    print(f"estimate {np.round(res.estimate, 6).tolist()} se {np.round(res.se, 6).tolist()} "
          f"({res.n_effective}/{res.n_paths} paths) -> {args.out}")
    ok = res.q_bound_violations == 0 and res.lambda_ok
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(args) -> int:
    from .suites import run_suite

    results = run_suite(args.suite)
    for r in results:
        print(r.line())
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} checks passed")
    return EXIT_OK if passed == len(results) else EXIT_FAIL


def cmd_sweep(args) -> int:
    from ..flows import run_flow
    from .audit import audit_inequality, scaling_sweep
    from .config import ConfigError, flow_config_from, load_flow_table
    from .runner import dump_json
    from .scenarios import flow_config

    try:
        cfg = flow_config(args.scenario) if args.scenario else flow_config_from(
            load_flow_table(args.config))
    except ConfigError as exc:
        return _print_config_error(exc)
    history = run_flow(cfg)
    fractions = tuple(args.fractions) if args.fractions else (0.125, 0.25, 0.5, 1.0)
    res = scaling_sweep(history, fractions)
    res["min_slope"] = args.min_slope
    res["passed"] = res["slope"] >= args.min_slope
    if args.x0 is not None:
        rec = audit_inequality(history, "remark-4.1-scaling", args.x0, args.r)
        res["audit"] = rec.to_dict()
        res["passed"] = res["passed"] and rec.passed
    if args.out:
        dump_json(args.out, res)
    for T, g in zip(res["T"], res["sup_grad"]):
        print(f"T = {T:.6g}  sup|grad a| = {g:.6g}")
    print(f"{'PASS' if res['passed'] else 'FAIL'}  slope {res['slope']:.3f} "
          f"(minimum {args.min_slope})")
    return EXIT_OK if res["passed"] else EXIT_FAIL


def cmd_report(args) -> int:
    from .runner import render_tables

    if not (Path(args.run) / "estimate.json").exists():
        print(f"no estimate.json in {args.run}", file=sys.stderr)
        return EXIT_USAGE
    for path in render_tables(args.run, args.out):
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowgrad", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="execute a scenario file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None, help="output root (default: scenario 'output' or runs/)")
    s.add_argument("--force", action="store_true", help="re-run even if the run directory exists")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("flow", help="run one flow and save its history")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("estimate", help="Monte Carlo derivative estimate on a saved history")
    s.add_argument("--history", required=True)
    s.add_argument("--x0", required=True, type=_floats)
    s.add_argument("--v", required=True, type=_floats, action="append",
                   help="direction in frame components; repeat for several")
    s.add_argument("--mode", choices=["global", "local"], default="global")
    s.add_argument("--paths", type=int, default=10000)
    s.add_argument("--dt", type=float, default=None)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--r", type=float, default=None, help="cutoff radius for local mode")
    s.add_argument("--order", type=int, choices=[1, 2], default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("verify", help="run a built-in check suite")
    s.add_argument("--suite", choices=["trivial", "oracle", "martingale", "all"], default="trivial")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", help="horizon sweep of sup|grad a_T| with a log-log slope fit")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--scenario")
    s.add_argument("--fractions", type=_floats, default=None)
    s.add_argument("--min-slope", type=float, default=-0.65)
    s.add_argument("--x0", type=_floats, default=None, help="also audit the T^-1/2 form here")
    s.add_argument("--r", type=float, default=1.0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="render a run's JSON report to CSV tables")
    s.add_argument("--run", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
