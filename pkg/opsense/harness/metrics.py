"""
Opsense — Experiment metrics
Reads the JSONL event log a run leaves behind and derives the reported
numbers from it:

  avg_time_per_request   duration of the experiment / completions
  completion_shares      per request stream, 100 * completions / all completions
  round trips            pull only, both ends read on the requester clock
  delivery latency       deliver modes, sensor timestamp to arrival (one-way, two clocks)

A completion is one `response` event (pull) or one fresh `deliver` event
(persistent_stream / push).
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from ..errors import BadRequest, NoCompletions
from ..models import RoundTripSample

logger = logging.getLogger("opsense.harness.metrics")

COMPLETION_EVENTS = ("response", "deliver")


@dataclass
class EventLog:
    header: dict[str, Any]
    events: list[dict[str, Any]] = field(default_factory=list)
    end: dict[str, Any] | None = None

    @property
    def complete(self) -> bool:
        return bool(self.end and self.end.get("complete"))

    @property
    def streams(self) -> list[str]:
        return [s["stream"] for s in self.header.get("streams", [])]

    @property
    def duration_ms(self) -> float:
        """Driving time of the run; a run that never wrote its end event ends at its last event."""
        if self.end is not None:
            return float(self.end["elapsed_ms"])
        last = max((e["t"] for e in self.events), default=self.header["t"])
        return float(last - self.header["t"])

    def of(self, kind: str) -> list[dict[str, Any]]:
        return [e for e in self.events if e["event"] == kind]


def read_event_log(path: str | Path) -> EventLog:
    """Parse a run log. A torn last line (crashed run) is skipped, anything else malformed raises."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    records: list[dict[str, Any]] = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except ValueError as exc:
            if i == len(lines) - 1:
                logger.warning("Ignoring torn last line of %s", path)
                break
            raise BadRequest(f"{path}:{i + 1}: malformed event: {exc}") from exc
    if not records or records[0].get("event") != "run":
        raise BadRequest(f"{path}: event log must start with a run header")
    log = EventLog(header=records[0])
    for record in records[1:]:
        if record.get("event") == "end":
            log.end = record
        else:
            log.events.append(record)
    return log


# ── Primitives ───────────────────────────────────────────────────────────────


def avg_time_per_request_ms(duration_ms: float, completions: int) -> float:
    if completions <= 0:
        raise NoCompletions("no round trip completed")
    return duration_ms / completions


def shares_from_counts(counts: Mapping[str, int]) -> dict[str, float]:
    total = sum(counts.values())
    if total <= 0:
        raise NoCompletions("no round trip completed")
    return {stream: 100.0 * n / total for stream, n in counts.items()}


def coefficient_of_variation(values: Iterable[float]) -> float:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0 or arr.mean() == 0:
        return 0.0
    return float(arr.std() / arr.mean())


# ── Log-level metrics ────────────────────────────────────────────────────────


def completions(log: EventLog) -> pd.Series:
    """Completions per request stream, every declared stream present (zero when idle)."""
    done = [e["stream"] for e in log.events if e["event"] in COMPLETION_EVENTS]
    counts = pd.Series(done, dtype="object").value_counts()
    index = log.streams or sorted(counts.index)
    return counts.reindex(index, fill_value=0).astype("int64")


def avg_time_per_request(log: EventLog) -> float:
    return avg_time_per_request_ms(log.duration_ms, int(completions(log).sum()))


def completion_shares(log: EventLog) -> dict[str, float]:
    return shares_from_counts({k: int(v) for k, v in completions(log).items()})


def round_trip_samples(log: EventLog) -> list[RoundTripSample]:
    """Requester-clock round trips: pull responses only."""
    return [
        RoundTripSample(
            request_id=e["request_id"],
            stream=e["stream"],
            sensor=e["sensor"],
            peer=e["peer"],
            t_sent=e["t_sent"],
            t_received=e["t"],
            duration_ms=e["duration_ms"],
        )
        for e in log.of("response")
    ]


def delivery_latencies(log: EventLog) -> list[float]:
    """
    Sensor timestamp to arrival, per delivered element. Spans two clocks: never
    mixed into round trips, never clamped.
    """
    return [float(e["latency_ms"]) for e in log.of("deliver")]


def describe(values: Iterable[float]) -> dict[str, float | None]:
    arr = np.asarray(list(values), dtype=np.float64)
    if not arr.size:
        return {"mean": None, "p50": None, "p95": None, "max": None}
    return {
        "mean": float(arr.mean()),
        "p50": float(np.percentile(arr, 50)),
        "p95": float(np.percentile(arr, 95)),
        "max": float(arr.max()),
    }


def round_trip_stats(samples: list[RoundTripSample]) -> dict[str, float | None]:
    return describe(s.duration_ms for s in samples)


def points_received(log: EventLog) -> int:
    return sum(e.get("elements", 0) for e in log.of("response")) + len(log.of("deliver"))


def throughput_points_per_min(log: EventLog) -> float:
    minutes = log.duration_ms / 60_000
    return points_received(log) / minutes if minutes > 0 else 0.0


def storage_rows(log: EventLog) -> list[dict[str, Any]]:
    return [{"t_ms": int(e["t"]), "node": e["node"], "bytes": int(e["bytes"])} for e in log.of("storage")]
