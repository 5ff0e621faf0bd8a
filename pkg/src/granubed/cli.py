"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import bench, driver
from .core import ConfigError, SimulationError, load_config, with_overrides


def _add_config(p):
    p.add_argument("--config", required=True, help="key=value configuration file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="granubed",
                                     description="desk-scale CFD-DEM fluidized bed solver")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a simulation")
    _add_config(run_p)
    run_p.add_argument("--ranks", type=int, default=None)
    run_p.add_argument("--ats", choices=["on", "off"], default=None)
    run_p.add_argument("--out", default=None, help="output directory for CSVs")
    run_p.add_argument("--comm", choices=["threads", "sockets"], default=None)
    run_p.add_argument("--snapshot", action="store_true",
                       help="write final particle positions")

    val_p = sub.add_parser("validate", help="dry-run configuration checks")
    _add_config(val_p)

    bench_p = sub.add_parser("bench", help="benchmark sweeps")
    bench_p.add_argument("kind", choices=["sizes", "weak", "ats"])
    _add_config(bench_p)
    bench_p.add_argument("--out", required=True)
    bench_p.add_argument("--max-factor", type=int, default=4)
    bench_p.add_argument("--ranks-list", default="1,2,4")
    bench_p.add_argument("--duration", type=float, default=bench.DESK_DURATION)
    return parser


def _cmd_run(args) -> int:
    config = load_config(args.config)
    overrides = {}
    if args.ranks is not None:
        overrides["ranks"] = args.ranks
    if args.ats is not None:
        overrides["ats_enabled"] = args.ats == "on"
    if args.comm is not None:
        overrides["comm_backend"] = args.comm
    if overrides:
        config = with_overrides(config, **overrides)
    driver.validate_config(config)
    result = driver.run(config, out_dir=args.out, snapshot=args.snapshot)
    print(f"completed {result.n_steps} fluid steps, "
          f"{result.total_substeps} particle substeps, "
          f"{result.counters.get('outflow', 0)} particles left through the top")
    return 0


def _cmd_validate(args) -> int:
    config = load_config(args.config)
    info = driver.validate_config(config)
    for key, val in info.items():
        print(f"{key} = {val}")
    return 0


def _cmd_bench(args) -> int:
    config = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "sizes":
        presets = bench.scale_presets(bench.DESK_BASE, args.max_factor)
        report = bench.run_size_sweep(presets, config, duration=args.duration)
        path = os.path.join(args.out, "bench_sizes.csv")
    elif args.kind == "weak":
        ranks = [int(tok) for tok in args.ranks_list.split(",") if tok]
        report = bench.run_weak_scaling(bench.DESK_BASE, ranks, config,
                                        duration=args.duration)
        path = os.path.join(args.out, "bench_weak.csv")
    else:
        report = bench.ats_comparison(bench.DESK_BASE, config,
                                      duration=args.duration)
        path = os.path.join(args.out, "bench_ats.csv")
    report.write_csv(path)
    print(f"wrote {path} ({len(report.rows)} rows)")
    for label, err in report.failures:
        print(f"failed: {label}: {err}", file=sys.stderr)
    return 0 if not report.failures else 3


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "validate":
            return _cmd_validate(args)
        return _cmd_bench(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SimulationError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
