"""
Opsense — Benchmark CLI
Usage:
    bench run --spec topology.json --out results/
    bench compare-modes --spec topology.json [--out results/]
    bench storage --history 10000 --duration 600 [--interval 1000] [--out results/]
    bench recompute --log results/events.jsonl [--summary results/summary.txt]
    bench topology [--clients 3] [--sensors 13] [--requests 30] [--mode pull] [--duration 60]

`bench aggregator --plan plan.json` is the aggregator process spawned by `run`.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import OpsenseError

EXIT_MISMATCH = 3


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _load_spec(path: str):
    from ..wire import load_file
    from .topology import TopologySpec

    return load_file(path, TopologySpec)


def _cmd_run(args: argparse.Namespace) -> None:
    from .report import summary_values
    from .runner import run_experiment

    report = run_experiment(_load_spec(args.spec), args.out, args.log_level)
    for key, value in summary_values(report).items():
        print(f"{key}: {'' if value is None else value}")
    if not report.complete:
        print(f"Run incomplete, partial report in {args.out}", file=sys.stderr)
        sys.exit(2)


def _cmd_compare(args: argparse.Namespace) -> None:
    from .runner import compare_modes

    comparison = compare_modes(_load_spec(args.spec), args.out, args.log_level)
    for mode in comparison.reports:
        row = comparison.row(mode)
        print(
            f"{mode:<18} completions={row['completions']} connections={row['connections']} "
            f"mean_latency={row['mean_delivery_latency_ms']} share_cv={row['share_cv']}"
        )
    for key, value in comparison.orderings.items():
        print(f"{key}: {value}")
    if not all(r.complete for r in comparison.reports.values()):
        sys.exit(2)


def _cmd_storage(args: argparse.Namespace) -> None:
    from .runner import emit_storage_bench, run_storage_bench

    result = run_storage_bench(args.history, args.duration, args.interval)
    if args.out:
        emit_storage_bench(result, args.out)
    for key, value in result.summary().items():
        print(f"{key}: {'' if value is None else value}")
    if result.linear_ok is False or result.flat_ok is False or result.max_window > args.history:
        sys.exit(EXIT_MISMATCH)


def _cmd_recompute(args: argparse.Namespace) -> None:
    from .oracle import check_report, recompute

    result = recompute(args.log)
    avg = result.avg_time_per_request_ms
    print(f"duration_ms: {result.duration_ms}")
    print(f"completions: {sum(result.completions.values())}")
    print(f"avg_time_per_request_ms: {'undefined' if avg is None else avg}")
    for stream, share in result.shares.items():
        print(f"share[{stream}]: {share!r}")
    if args.summary:
        problems = check_report(result, args.summary)
        for p in problems:
            print(f"MISMATCH {p.metric}: recomputed {p.expected}, reported {p.found}", file=sys.stderr)
        if problems:
            sys.exit(EXIT_MISMATCH)
        print(f"{args.summary}: matches")


def _cmd_topology(args: argparse.Namespace) -> None:
    from .topology import default_topology

    spec = default_topology(
        clients=args.clients,
        sensors_per_client=args.sensors,
        requests_per_client=args.requests,
        mode=args.mode,
        duration=args.duration,
        seed=args.seed,
    )
    print(json.dumps(spec.model_dump(mode="json"), indent=2))


def _cmd_aggregator(args: argparse.Namespace) -> None:
    from ..wire import load_file
    from .driver import run_aggregator
    from .topology import RunPlan

    sys.exit(run_aggregator(load_file(args.plan, RunPlan), args.log_level))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description="Opsense benchmark harness.")
    parser.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run one experiment and write its report")
    run.add_argument("--spec", required=True, help="Topology spec file")
    run.add_argument("--out", required=True, type=Path, help="Output directory")
    run.set_defaults(func=_cmd_run)

    compare = sub.add_parser("compare-modes", help="Paired persistent_stream vs push runs")
    compare.add_argument("--spec", required=True)
    compare.add_argument("--out", default=Path("bench-compare"), type=Path)
    compare.set_defaults(func=_cmd_compare)

    storage = sub.add_parser("storage", help="Storage growth of one window in simulated time")
    storage.add_argument("--history", required=True, type=int)
    storage.add_argument("--duration", required=True, type=float, help="Seconds of simulated sampling")
    storage.add_argument("--interval", default=1000, type=int, help="Sampling interval in ms")
    storage.add_argument("--out", default=None, type=Path)
    storage.set_defaults(func=_cmd_storage)

    recompute = sub.add_parser("recompute", help="Recompute the metrics from a raw event log")
    recompute.add_argument("--log", required=True)
    recompute.add_argument("--summary", default=None, help="summary.txt to check against")
    recompute.set_defaults(func=_cmd_recompute)

    topology = sub.add_parser("topology", help="Print a default topology spec")
    topology.add_argument("--clients", default=3, type=int)
    topology.add_argument("--sensors", default=13, type=int)
    topology.add_argument("--requests", default=30, type=int)
    topology.add_argument("--mode", default="pull", choices=["pull", "push", "persistent_stream"])
    topology.add_argument("--duration", default=60, type=float)
    topology.add_argument("--seed", default=0, type=int)
    topology.set_defaults(func=_cmd_topology)

    aggregator = sub.add_parser("aggregator")
    aggregator.add_argument("--plan", required=True)
    aggregator.set_defaults(func=_cmd_aggregator)
    return parser


def main(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    _configure_logging(args.log_level)
    try:
        args.func(args)
    except OpsenseError as exc:
        print(f"Error [{exc.code}]: {exc}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
