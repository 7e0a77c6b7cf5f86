"""Command line entry point.

    nestkq sweep --problem synthetic --estimator nkq,nmc --delta-grid 0.1,0.05,0.02 --replicates 20 --out runs.csv
    nestkq estimate --problem finance --estimator nkq --N 128 --T 128
    nestkq fit runs.csv

``sweep`` is the default subcommand, so ``nestkq --problem ...`` works too.
Flags override values read from ``--config`` (a JSON object with the keys
documented in :func:`nestkq.harness.spec_from_dict`).

Exit status: 0 on success, 2 for configuration errors, 3 when some cells
of a sweep failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import harness
from .harness import EXIT_CONFIG, EXIT_OK, ConfigError

COMMANDS = ("sweep", "estimate", "fit")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _common(p: argparse.ArgumentParser):
    p.add_argument("--problem", help="synthetic, synthetic<d>, finance, evppi or gp_lookahead")
    p.add_argument("--set", dest="overrides", action="append", type=_override, default=[], metavar="KEY=VALUE",
                   help="problem parameter override (repeatable; values parsed as JSON when possible)")
    p.add_argument("--seed", type=int)
    p.add_argument("--qmc", action="store_true", default=None, help="scrambled Sobol points instead of i.i.d.")
    p.add_argument("--lambda0-x", type=float)
    p.add_argument("--lambda0-theta", type=float)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nestkq", description="Nested expectation estimators and sweeps.")
    sub = parser.add_subparsers(dest="command")

    sw = sub.add_parser("sweep", help="replicated convergence sweep written to CSV")
    _common(sw)
    sw.add_argument("--config", help="JSON configuration file")
    sw.add_argument("--estimator", help="comma-separated list from: " + ", ".join(harness.ESTIMATORS))
    grid = sw.add_mutually_exclusive_group()
    grid.add_argument("--delta-grid", type=_floats, help="target accuracies, e.g. 0.1,0.05,0.02")
    grid.add_argument("--cost-grid", type=_floats, help="target numbers of g evaluations")
    sw.add_argument("--replicates", type=int)
    sw.add_argument("--out", help="CSV file (rows are appended)")
    sw.add_argument("--overwrite", action="store_true", help="truncate --out instead of appending")
    sw.add_argument("--lambda0-search", action="store_true", default=None,
                    help="grid-search lambda0 pairs on a pilot budget first")
    sw.add_argument("--workers", type=int)

    est = sub.add_parser("estimate", help="a single estimate")
    _common(est)
    est.add_argument("--estimator", default="nkq", choices=harness.ESTIMATORS)
    est.add_argument("--N", type=_ints, required=True, help="inner size, or per-level sizes for mlmc/mlkq")
    est.add_argument("--T", type=_ints, required=True, help="outer size, or per-level sizes for mlmc/mlkq")

    fit = sub.add_parser("fit", help="summarise a sweep CSV and fit log-log rates")
    fit.add_argument("csv")
    fit.add_argument("-v", "--verbose", action="store_true")
    return parser


def _sweep_config(args) -> dict:
    cfg = harness.load_config(args.config) if args.config else {}
    if args.problem is not None:
        cfg["problem"] = args.problem
    if args.overrides:
        cfg["overrides"] = {**cfg.get("overrides", {}), **dict(args.overrides)}
    if args.estimator is not None:
        cfg["estimators"] = [e.strip() for e in args.estimator.split(",") if e.strip()]
    if args.delta_grid is not None:
        cfg.pop("cost_grid", None)
        cfg.pop("sizes", None)
        cfg["delta_grid"] = args.delta_grid
    if args.cost_grid is not None:
        cfg.pop("delta_grid", None)
        cfg.pop("sizes", None)
        cfg["cost_grid"] = args.cost_grid
    for key in ("replicates", "seed", "out", "qmc", "lambda0_x", "lambda0_theta", "lambda0_search", "workers"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    if args.overwrite:
        cfg["append"] = False
    return cfg


def _print_summary(records, out=None):
    out = out or sys.stdout
    summaries = harness.summarize(records)
    print(f"{'estimator':<9} {'points':<6} {'N':>14} {'T':>14} {'cost':>10} {'runs':>5} "
          f"{'mean err':>11} {'q25':>11} {'q75':>11} {'ms':>9}", file=out)
    for s in summaries:
        print(f"{s.estimator:<9} {s.point_source:<6} {harness._fmt_sizes(s.N):>14} {harness._fmt_sizes(s.T):>14} "
              f"{s.cost:>10.0f} {s.count:>5d} {s.mean_error:>11.4e} {s.q25:>11.4e} {s.q75:>11.4e} "
              f"{s.mean_wall_millis:>9.1f}", file=out)
    for (est, src), (slope, rate) in harness.fit_rates(summaries).items():
        print(f"{est} ({src}): slope {slope:.3f}, rate r = {rate:.3f}", file=out)


def cmd_sweep(args) -> int:
    spec = harness.spec_from_dict(_sweep_config(args))
    start = time.perf_counter()
    result = harness.run_sweep(spec)
    if result.lambda0 is not None:
        print(f"selected lambda0_x={result.lambda0[0]:g} lambda0_theta={result.lambda0[1]:g}")
    if result.records:
        _print_summary(result.records)
    for est, budget, rep, msg in result.failures:
        print(f"FAILED {est} {budget} replicate {rep}: {msg}", file=sys.stderr)
    print(f"{len(result.records)} records in {time.perf_counter() - start:.1f} s"
          + (f" -> {spec.out}" if spec.out else ""))
    return result.exit_code


def cmd_estimate(args) -> int:
    if args.problem is None:
        raise ConfigError("--problem is required")
    try:
        problem = harness.get_problem(args.problem, **dict(args.overrides))
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    N = tuple(args.N) if len(args.N) > 1 or args.estimator in ("mlmc", "mlkq") else args.N[0]
    T = tuple(args.T) if len(args.T) > 1 or args.estimator in ("mlmc", "mlkq") else args.T[0]
    budget = harness.Budget("sizes", N=N, T=T)
    plan = harness.plan_cell(problem, args.estimator, budget)
    rec = harness.run_cell(problem, args.problem, args.estimator, plan, 0, args.seed or 0,
                           "qmc" if args.qmc else "iid",
                           0.1 if args.lambda0_x is None else args.lambda0_x,
                           0.1 if args.lambda0_theta is None else args.lambda0_theta)
    print(f"estimate {rec.estimate:.10g}")
    print(f"cost {rec.cost} g evaluations, {rec.wall_millis:.1f} ms")
    if problem.true_value is not None:
        print(f"true value {problem.true_value:.10g}, abs error {rec.abs_error:.4e}")
    return EXIT_OK


def cmd_fit(args) -> int:
    try:
        records = harness.read_csv(args.csv)
    except (OSError, ValueError) as err:
        raise ConfigError(str(err)) from None
    if not records:
        raise ConfigError(f"{args.csv} has no records")
    _print_summary(records)
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] not in COMMANDS and argv[0] not in ("-h", "--help"):
        argv.insert(0, "sweep")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"sweep": cmd_sweep, "estimate": cmd_estimate, "fit": cmd_fit}[args.command]
    try:
        return handler(args)
    except ConfigError as err:
        print(f"nestkq: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as err:
        if args.command == "sweep":
            raise
        print(f"nestkq: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
