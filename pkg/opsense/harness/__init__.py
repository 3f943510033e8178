"""Opsense benchmark harness: topologies, load driver, metrics and reports."""

from .metrics import EventLog, avg_time_per_request, completion_shares, read_event_log
from .report import ExperimentReport, build_report, emit_report
from .runner import compare_modes, run_experiment, run_storage_bench
from .topology import TopologySpec, default_topology

__all__ = [
    "EventLog",
    "ExperimentReport",
    "TopologySpec",
    "avg_time_per_request",
    "build_report",
    "compare_modes",
    "completion_shares",
    "default_topology",
    "emit_report",
    "read_event_log",
    "run_experiment",
    "run_storage_bench",
]
