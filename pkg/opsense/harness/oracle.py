"""
Opsense — Metric oracle
Recomputes the headline numbers straight from the raw event log with plain
loops, sharing no code with metrics.py, and checks an emitted report
against them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from ..errors import BadRequest, NoCompletions
from .report import read_summary

SHARE_TOLERANCE = 1e-9


@dataclass
class OracleResult:
    duration_ms: float
    completions: dict[str, int] = field(default_factory=dict)
    avg_time_per_request_ms: float | None = None
    shares: dict[str, float] = field(default_factory=dict)


def recompute(log_path: str | Path) -> OracleResult:
    """Brute-force pass: count completion lines per stream, divide."""
    header = None
    end = None
    last_t = None
    counts: dict[str, int] = {}
    with Path(log_path).open(encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except ValueError:
                break  # torn tail of a killed run
            kind = record["event"]
            if kind == "run":
                header = record
                for s in record.get("streams", []):
                    counts[s["stream"]] = 0
                continue
            if kind == "end":
                end = record
                continue
            last_t = record["t"] if last_t is None else max(last_t, record["t"])
            if kind == "response" or kind == "deliver":
                counts[record["stream"]] = counts.get(record["stream"], 0) + 1
    if header is None:
        raise BadRequest(f"{log_path}: no run header")

    if end is not None:
        duration = float(end["elapsed_ms"])
    else:
        duration = float((last_t if last_t is not None else header["t"]) - header["t"])

    total = 0
    for n in counts.values():
        total += n
    result = OracleResult(duration_ms=duration, completions=counts)
    if total:
        result.avg_time_per_request_ms = duration / total
        result.shares = {stream: 100.0 * n / total for stream, n in counts.items()}
    return result


@dataclass
class Mismatch:
    metric: str
    expected: str
    found: str


def check_report(result: OracleResult, summary_path: str | Path) -> list[Mismatch]:
    """
    Compare against summary.txt and the shares.csv next to it: the average to
    the millisecond, each share within SHARE_TOLERANCE.
    """
    summary_path = Path(summary_path)
    summary = read_summary(summary_path)
    problems: list[Mismatch] = []

    reported = summary.get("avg_time_per_request_ms", "")
    if result.avg_time_per_request_ms is None:
        if reported != "undefined":
            problems.append(Mismatch("avg_time_per_request_ms", "undefined", reported))
    else:
        try:
            same = round(float(reported)) == round(result.avg_time_per_request_ms)
        except ValueError:
            same = False
        if not same:
            problems.append(Mismatch("avg_time_per_request_ms", f"{result.avg_time_per_request_ms:.3f}", reported))

    shares_path = summary_path.parent / "shares.csv"
    if shares_path.exists():
        df = pd.read_csv(shares_path, dtype={"stream": str})
        reported_shares = dict(zip(df["stream"], df["share_pct"], strict=True))
        for stream, share in result.shares.items():
            found = reported_shares.get(stream)
            if found is None or abs(float(found) - share) > SHARE_TOLERANCE:
                problems.append(Mismatch(f"share[{stream}]", repr(share), repr(found)))
    return problems


def require_completions(result: OracleResult) -> float:
    if result.avg_time_per_request_ms is None:
        raise NoCompletions("the log holds no completed round trip")
    return result.avg_time_per_request_ms
