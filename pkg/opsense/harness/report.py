"""
Opsense — Experiment report
Builds the report of one run from its event log and writes it out.

Files written by emit_report, fixed column order:
  samples.csv   request_id, stream, sensor, peer, t_sent, t_received, duration_ms (pull round trips)
  shares.csv    stream, completions, share_pct
  storage.csv   t_ms, node, bytes
  summary.txt   one `key: value` per line, keys in SUMMARY_KEYS order
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import pandas as pd
from pydantic import BaseModel, Field

from ..errors import IOUnwritable, NoCompletions
from ..models import RoundTripSample
from . import metrics
from .metrics import EventLog

logger = logging.getLogger("opsense.harness.report")

SAMPLE_COLUMNS = ["request_id", "stream", "sensor", "peer", "t_sent", "t_received", "duration_ms"]
SHARE_COLUMNS = ["stream", "completions", "share_pct"]
STORAGE_COLUMNS = ["t_ms", "node", "bytes"]
SUMMARY_KEYS = [
    "mode",
    "complete",
    "duration_ms",
    "completions",
    "avg_time_per_request_ms",
    "throughput_points_per_min",
    "mean_round_trip_ms",
    "p50_round_trip_ms",
    "p95_round_trip_ms",
    "mean_delivery_latency_ms",
    "p95_delivery_latency_ms",
    "share_cv",
    "connections",
    "delivered",
    "overhead_bytes_per_element",
]


class ExperimentReport(BaseModel):
    mode: str = ""
    complete: bool = False
    duration_ms: float = 0.0
    samples: list[RoundTripSample] = Field(default_factory=list)
    delivery_latencies_ms: list[float] = Field(default_factory=list)
    completions: dict[str, int] = Field(default_factory=dict)
    avg_time_per_request_ms: float | None = None
    completion_shares: dict[str, float] = Field(default_factory=dict)
    storage_series: list[dict[str, Any]] = Field(default_factory=list)
    throughput_points_per_min: float = 0.0
    connections: int = 0
    delivered: int = 0
    overhead_bytes_per_element: float | None = None
    work: dict[str, Any] = Field(default_factory=dict)
    config: dict[str, Any] = Field(default_factory=dict)

    @property
    def share_cv(self) -> float | None:
        if not self.completion_shares:
            return None
        return metrics.coefficient_of_variation(self.completion_shares.values())

    @property
    def round_trip(self) -> dict[str, float | None]:
        return metrics.round_trip_stats(self.samples)

    @property
    def delivery_latency(self) -> dict[str, float | None]:
        return metrics.describe(self.delivery_latencies_ms)


def _transport_counters(log: EventLog) -> tuple[int, int, float | None]:
    """Connections, delivered elements and per-element wire overhead, as seen by the senders."""
    end = log.end or {}
    deliveries = end.get("deliveries", [])
    if log.header.get("mode") == "pull" or not deliveries:
        responses = len(log.of("response"))
        # pull opens one connection per request
        return responses + len(log.of("error")), responses, None
    connections = sum(d["connections"] for d in deliveries)
    delivered = sum(d["delivered"] for d in deliveries)
    wire = sum(d["wire_bytes"] for d in deliveries)
    payload = sum(d["payload_bytes"] for d in deliveries)
    overhead = (wire - payload) / delivered if delivered else None
    return connections, delivered, overhead


def build_report(log: EventLog) -> ExperimentReport:
    counts = metrics.completions(log)
    try:
        avg = metrics.avg_time_per_request(log)
        shares = metrics.completion_shares(log)
    except NoCompletions:
        avg, shares = None, {}
    connections, delivered, overhead = _transport_counters(log)
    return ExperimentReport(
        mode=log.header.get("mode", ""),
        complete=log.complete and avg is not None,
        duration_ms=log.duration_ms,
        samples=metrics.round_trip_samples(log),
        delivery_latencies_ms=metrics.delivery_latencies(log),
        completions={k: int(v) for k, v in counts.items()},
        avg_time_per_request_ms=avg,
        completion_shares=shares,
        storage_series=metrics.storage_rows(log),
        throughput_points_per_min=metrics.throughput_points_per_min(log),
        connections=connections,
        delivered=delivered,
        overhead_bytes_per_element=overhead,
        work=(log.end or {}).get("work", {}),
        config=log.header.get("spec", {}),
    )


def summary_values(report: ExperimentReport) -> dict[str, Any]:
    rt = report.round_trip
    latency = report.delivery_latency
    avg = report.avg_time_per_request_ms
    return {
        "mode": report.mode,
        "complete": report.complete,
        "duration_ms": report.duration_ms,
        "completions": sum(report.completions.values()),
        "avg_time_per_request_ms": avg if avg is not None else "undefined",
        "throughput_points_per_min": report.throughput_points_per_min,
        "mean_round_trip_ms": rt["mean"],
        "p50_round_trip_ms": rt["p50"],
        "p95_round_trip_ms": rt["p95"],
        "mean_delivery_latency_ms": latency["mean"],
        "p95_delivery_latency_ms": latency["p95"],
        "share_cv": report.share_cv,
        "connections": report.connections,
        "delivered": report.delivered,
        "overhead_bytes_per_element": report.overhead_bytes_per_element,
    }


def read_summary(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        key, sep, value = line.partition(":")
        if sep:
            out[key.strip()] = value.strip()
    return out


def emit_report(report: ExperimentReport, out_dir: str | Path) -> list[Path]:
    """Write the four report files. Same report in, byte-identical files out."""
    out = Path(out_dir)
    samples = pd.DataFrame([s.model_dump() for s in report.samples], columns=SAMPLE_COLUMNS)
    shares = pd.DataFrame(
        [
            {"stream": stream, "completions": n, "share_pct": report.completion_shares.get(stream, 0.0)}
            for stream, n in report.completions.items()
        ],
        columns=SHARE_COLUMNS,
    )
    storage = pd.DataFrame(report.storage_series, columns=STORAGE_COLUMNS)
    values = summary_values(report)
    summary = "".join(f"{key}: {'' if values[key] is None else values[key]}\n" for key in SUMMARY_KEYS)
    paths = [out / "samples.csv", out / "shares.csv", out / "storage.csv", out / "summary.txt"]
    try:
        out.mkdir(parents=True, exist_ok=True)
        samples.to_csv(paths[0], index=False)
        shares.to_csv(paths[1], index=False)
        storage.to_csv(paths[2], index=False)
        paths[3].write_text(summary, encoding="utf-8")
    except OSError as exc:
        raise IOUnwritable(f"cannot write report to {out}: {exc}") from exc
    logger.info("Report written to %s", out)
    return paths
