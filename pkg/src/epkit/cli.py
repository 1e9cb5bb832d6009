"""Command-line experiment runner.

Subcommands: clutter | bpm | loopy run the corresponding experiment and
write CSV + sidecar; oracle-check runs the analytic-vs-oracle batteries and
prints a pass/fail table.  Exit codes: 0 success, 1 validation error,
2 oracle-check failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .engine import EPOptions, Schedule
from .experiments import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    oracle_check_battery,
    run_experiment,
    write_results,
)


def _parse_seed_range(text: str) -> tuple[int, ...]:
    try:
        if ".." in text:
            a, b = text.split("..")
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError
            return tuple(range(lo, hi + 1))
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"bad seed range {text!r}; expected a..b or a,b,c") from None


def _parse_schedule(text: str) -> Schedule:
    if text == "sequential":
        return Schedule("sequential")
    if text.startswith("random"):
        seed = int(text.split(":", 1)[1]) if ":" in text else 0
        return Schedule("random", seed)
    raise ConfigError(f"bad schedule {text!r}; expected sequential or random[:seed]")


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="JSON experiment config; flags below override it")
    p.add_argument("--out", type=Path, default=None, help="output CSV path")
    p.add_argument("--seed-range", default=None, metavar="A..B")
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--max-sweeps", type=int, default=None)
    p.add_argument("--damping", type=float, default=None)
    p.add_argument("--schedule", default=None,
                   help="sequential (default) or random[:seed]")
    p.add_argument("--timings", action="store_true",
                   help="include wall-clock columns (breaks byte-identical output)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epkit", description="ADF/EP experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in ("clutter", "bpm", "loopy"):
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        _add_common_flags(p)
    p = sub.add_parser("oracle-check",
                       help="run analytic-vs-oracle batteries")
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--seed", type=int, default=1234)
    return parser


def _load_config(kind: str, args: argparse.Namespace) -> ExperimentConfig:
    doc = {"kind": kind}
    if args.config is not None:
        try:
            doc.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        doc["kind"] = kind
    config = config_from_dict(doc)

    opts: EPOptions = config.ep_options
    if args.tolerance is not None:
        opts = replace(opts, tolerance=args.tolerance)
    if args.max_sweeps is not None:
        opts = replace(opts, max_sweeps=args.max_sweeps)
    if args.damping is not None:
        opts = replace(opts, damping=args.damping)
    if args.schedule is not None:
        opts = replace(opts, schedule=_parse_schedule(args.schedule))
    config = replace(config, ep_options=opts)
    if args.seed_range is not None:
        config = replace(config, seeds=_parse_seed_range(args.seed_range))
    if args.timings:
        config = replace(config, timings=True)
    return config


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "oracle-check":
        results = oracle_check_battery(cases=args.cases, seed=args.seed)
        width = max(len(r.name) for r in results)
        ok = True
        for r in results:
            status = "PASS" if r.passed else "FAIL"
            print(f"{r.name:<{width}}  worst {r.worst:.3e}  "
                  f"tol {r.tolerance:.0e}  {status}")
            ok = ok and r.passed
        return 0 if ok else 2

    try:
        config = _load_config(args.command, args)
        rows = run_experiment(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = args.out if args.out is not None else Path(f"{args.command}_results.csv")
    write_results(config, rows, out)
    n_conv = sum(1 for r in rows if r.method == "ep" and not r.converged)
    print(f"wrote {len(rows)} rows to {out}"
          + (f" ({n_conv} non-converged ep rows)" if n_conv else ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
