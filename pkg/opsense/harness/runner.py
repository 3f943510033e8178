"""
Opsense — Experiment runner
Spawns a topology as separate OS processes (one aggregator, N client
nodes), waits for the aggregator to finish driving load, tears the clients
down and turns the event log into a report.

Also hosts the paired persistent/push comparison and the storage bench,
which runs in simulated time on an in-process node.
"""

from __future__ import annotations

import logging
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from ..errors import BadRequest, IOUnwritable, SpawnFailed
from ..models import FieldSchema, NodeConfig, SourceSpec, VirtualSensorConfig
from ..node.engine import Node
from ..node.runner import bind_socket
from ..storage import StoragePoint, StorageRecorder
from ..wire import element_size, save_file
from .metrics import read_event_log
from .report import ExperimentReport, build_report, emit_report
from .topology import ClientEndpoint, RunPlan, TopologySpec, client_config

logger = logging.getLogger("opsense.harness.runner")

LOG_NAME = "events.jsonl"
TEARDOWN_GRACE_S = 5.0
# slack on top of registration + duration for subscribe, collect and shutdown
AGGREGATOR_SLACK_S = 180.0


def _free_address(host: str) -> str:
    sock = bind_socket(host, 0)
    try:
        return f"{host}:{sock.getsockname()[1]}"
    finally:
        sock.close()


def _spawn(args: list[str], log_file: Path) -> subprocess.Popen:
    try:
        with log_file.open("w", encoding="utf-8") as fh:
            return subprocess.Popen(args, stdout=fh, stderr=subprocess.STDOUT)
    except OSError as exc:
        raise SpawnFailed(f"cannot start {' '.join(args[:4])}: {exc}") from exc


def _terminate(proc: subprocess.Popen) -> None:
    if proc.poll() is not None:
        return
    proc.terminate()
    try:
        proc.wait(TEARDOWN_GRACE_S)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.wait()


def run_experiment(
    spec: TopologySpec, out_dir: str | Path, log_level: str = "warning", python: str = sys.executable
) -> ExperimentReport:
    """
    Run one experiment and emit its report into out_dir. A run that never got
    all clients registered, or lost one, still yields a report flagged incomplete.
    """
    out = Path(out_dir)
    try:
        (out / "nodes").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOUnwritable(f"cannot create {out}: {exc}") from exc

    aggregator_listen = _free_address(spec.host)
    endpoints = []
    for client in spec.clients:
        address = _free_address(spec.host)
        save_file(out / "nodes" / f"{client.node_id}.json", client_config(client, spec, address, aggregator_listen))
        endpoints.append(ClientEndpoint(node_id=client.node_id, address=address))
    plan = RunPlan(
        spec=spec,
        aggregator_listen=aggregator_listen,
        clients=tuple(endpoints),
        log_path=str(out / LOG_NAME),
    )
    plan_path = out / "plan.json"
    save_file(plan_path, plan)

    clients: list[subprocess.Popen] = []
    aggregator: subprocess.Popen | None = None
    try:
        aggregator = _spawn(
            [python, "-m", "opsense.harness.cli", "--log-level", log_level, "aggregator", "--plan", str(plan_path)],
            out / "aggregator.log",
        )
        for endpoint in endpoints:
            clients.append(
                _spawn(
                    [
                        python,
                        "-m",
                        "opsense.cli",
                        "--log-level",
                        log_level,
                        "node",
                        "--config",
                        str(out / "nodes" / f"{endpoint.node_id}.json"),
                    ],
                    out / f"{endpoint.node_id}.log",
                )
            )
        logger.info("Spawned aggregator on %s and %d clients (%s mode)", aggregator_listen, len(clients), spec.mode)

        wait_s = plan.registration_timeout + spec.duration + AGGREGATOR_SLACK_S
        try:
            code = aggregator.wait(wait_s)
        except subprocess.TimeoutExpired:
            logger.error("Aggregator still running after %.0fs, killing it", wait_s)
            code = None
        dead = [e.node_id for e, p in zip(endpoints, clients, strict=True) if p.poll() is not None]
        if dead:
            logger.warning("Clients exited before teardown: %s", dead)
    finally:
        for proc in clients:
            _terminate(proc)
        if aggregator is not None:
            _terminate(aggregator)

    log_path = out / LOG_NAME
    if not log_path.exists() or log_path.stat().st_size == 0:
        raise SpawnFailed(f"aggregator exited with {code} without writing {log_path}; see {out / 'aggregator.log'}")
    report = build_report(read_event_log(log_path))
    if code != 0:
        report = report.model_copy(update={"complete": False})
    emit_report(report, out)
    return report


# ── Paired comparison ────────────────────────────────────────────────────────

COMPARED_MODES = ("persistent_stream", "push")


@dataclass
class ModeComparison:
    reports: dict[str, ExperimentReport]

    def row(self, mode: str) -> dict[str, Any]:
        r = self.reports[mode]
        return {
            "mode": mode,
            "complete": r.complete,
            "completions": sum(r.completions.values()),
            "mean_delivery_latency_ms": r.delivery_latency["mean"],
            "p95_delivery_latency_ms": r.delivery_latency["p95"],
            "connections": r.connections,
            "delivered": r.delivered,
            "overhead_bytes_per_element": r.overhead_bytes_per_element,
            "share_cv": r.share_cv,
        }

    @property
    def orderings(self) -> dict[str, bool | None]:
        persistent, push = self.reports["persistent_stream"], self.reports["push"]
        p_lat, q_lat = persistent.delivery_latency["mean"], push.delivery_latency["mean"]
        p_cv, q_cv = persistent.share_cv, push.share_cv
        return {
            "push_connections_gt_persistent": push.connections > persistent.connections,
            "push_connections_eq_delivered": push.connections == push.delivered,
            "push_latency_ge_persistent": None if p_lat is None or q_lat is None else q_lat >= p_lat,
            "persistent_share_cv_lt_push": None if p_cv is None or q_cv is None else p_cv < q_cv,
        }


def compare_modes(spec: TopologySpec, out_dir: str | Path, log_level: str = "warning") -> ModeComparison:
    """Same topology and seeds, once per delivery mode; comparison.csv/.txt next to the per-mode reports."""
    out = Path(out_dir)
    reports = {}
    for mode in COMPARED_MODES:
        logger.info("Paired run: %s", mode)
        reports[mode] = run_experiment(spec.model_copy(update={"mode": mode}), out / mode, log_level)
    comparison = ModeComparison(reports)
    table = pd.DataFrame([comparison.row(m) for m in COMPARED_MODES])
    lines = [f"{k}: {'' if v is None else v}" for k, v in comparison.orderings.items()]
    try:
        table.to_csv(out / "comparison.csv", index=False)
        (out / "comparison.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IOUnwritable(f"cannot write comparison to {out}: {exc}") from exc
    return comparison


# ── Storage bench ────────────────────────────────────────────────────────────

BENCH_SENSOR = "storage_bench"
SIM_EPOCH_MS = 1_600_000_000_000
MAX_LINEAR_RESIDUAL = 0.02


@dataclass
class StorageBenchResult:
    history: int
    interval_ms: int
    series: list[StoragePoint] = field(default_factory=list)
    saturated_at: int | None = None
    element_bytes: int = 0
    max_window: int = 0
    linear_residual: float | None = None
    post_saturation_range: int | None = None

    @property
    def linear_ok(self) -> bool | None:
        return None if self.linear_residual is None else self.linear_residual < MAX_LINEAR_RESIDUAL

    @property
    def flat_ok(self) -> bool | None:
        if self.post_saturation_range is None:
            return None
        return self.post_saturation_range < self.element_bytes

    def summary(self) -> dict[str, Any]:
        return {
            "history": self.history,
            "interval_ms": self.interval_ms,
            "samples": len(self.series),
            "saturated_at": self.saturated_at,
            "element_bytes": self.element_bytes,
            "max_window": self.max_window,
            "linear_residual": self.linear_residual,
            "linear_ok": self.linear_ok,
            "post_saturation_range": self.post_saturation_range,
            "flat_ok": self.flat_ok,
        }


def linear_fit_residual(ts: np.ndarray, ys: np.ndarray) -> float:
    """Largest deviation from the least-squares line, relative to the last value."""
    if len(ys) < 3 or ys[-1] == 0:
        return 0.0
    slope, intercept = np.polyfit(ts, ys, 1)
    return float(np.max(np.abs(ys - (slope * ts + intercept))) / ys[-1])


def run_storage_bench(
    history: int, duration_s: float, interval_ms: int = 1000, value: float = 21.5
) -> StorageBenchResult:
    """
    One constant-valued sensor ticked in simulated time for duration_s, one
    storage snapshot per tick. Element sizes then only vary with the seq's
    digit count, so growth before saturation is linear and flat after it.
    """
    if history < 1 or duration_s <= 0 or interval_ms < 1:
        raise BadRequest("history, duration and interval must be positive")
    sensor = VirtualSensorConfig(
        name=BENCH_SENSOR,
        source=SourceSpec(plugin="constant", params={"value": value}),
        output_schema=(FieldSchema(name="value"),),
        history_size=history,
        sampling_interval=max(interval_ms, 10),
    )
    node = Node(NodeConfig(node_id="storage-bench", listen="127.0.0.1:0", sensors=(sensor,)))
    store = node.store(BENCH_SENSOR)
    assert store is not None
    recorder = StorageRecorder(lambda: [store])
    result = StorageBenchResult(history=history, interval_ms=interval_ms)

    steps = int(duration_s * 1000 // interval_ms)
    for i in range(steps):
        now = SIM_EPOCH_MS + i * interval_ms
        element = node.tick(BENCH_SENSOR, now)
        recorder.snapshot(now)
        if element is not None:
            result.element_bytes = max(result.element_bytes, element_size(element))
        result.max_window = max(result.max_window, len(store))
        if result.saturated_at is None and len(store) == history:
            result.saturated_at = i

    result.series = recorder.series
    ts = np.asarray([p.t_ms - SIM_EPOCH_MS for p in result.series], dtype=np.float64)
    ys = np.asarray([p.bytes for p in result.series], dtype=np.float64)
    cut = len(ys) if result.saturated_at is None else result.saturated_at + 1
    if cut >= 3:
        result.linear_residual = linear_fit_residual(ts[:cut], ys[:cut])
    if result.saturated_at is not None and cut < len(ys):
        post = ys[result.saturated_at :]
        result.post_saturation_range = int(post.max() - post.min())
    logger.info(
        "Storage bench: %d ticks, saturated at %s, residual %s", steps, result.saturated_at, result.linear_residual
    )
    return result


def emit_storage_bench(result: StorageBenchResult, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    paths = [out / "storage.csv", out / "storage_summary.txt"]
    series = pd.DataFrame(
        [{"t_ms": p.t_ms, "node": "storage-bench", "bytes": p.bytes} for p in result.series],
        columns=["t_ms", "node", "bytes"],
    )
    summary = "".join(f"{k}: {'' if v is None else v}\n" for k, v in result.summary().items())
    try:
        out.mkdir(parents=True, exist_ok=True)
        series.to_csv(paths[0], index=False)
        paths[1].write_text(summary, encoding="utf-8")
    except OSError as exc:
        raise IOUnwritable(f"cannot write storage bench to {out}: {exc}") from exc
    return paths
