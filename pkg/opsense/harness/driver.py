"""
Opsense — Load driver
Runs inside the aggregator process: waits for every client to register,
drives the request streams for the run duration and writes the event log
(one JSON object per line) that metrics and the oracle read back.
"""

from __future__ import annotations

import asyncio
import json
import logging
import threading
import time
from pathlib import Path
from typing import IO, Any

import httpx

from ..client import AsyncPeerClient, base_url_for
from ..errors import OpsenseError
from ..models import StreamElement, Subscription
from ..node.engine import Node, RequesterClock
from ..node.queries import Throttle
from ..node.runner import NodeRunner
from ..wire import new_id
from .topology import HarnessMode, RunPlan, StreamTarget, stream_targets

logger = logging.getLogger("opsense.harness.driver")


class EventLogWriter:
    """Append-only JSONL log; every line is flushed so a killed run leaves a readable prefix."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh: IO[str] = self.path.open("w", encoding="utf-8")
        self._lock = threading.Lock()

    def write(self, event: str, **fields: Any) -> None:
        line = json.dumps({"event": event, **fields}, separators=(",", ":"), allow_nan=False)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class LoadDriver:
    def __init__(
        self,
        node: Node,
        targets: list[StreamTarget],
        addresses: dict[str, str],
        mode: HarnessMode,
        duration_s: float,
        interval_s: float,
        log: EventLogWriter,
        storage_interval_s: float = 1.0,
        throttle: Throttle | None = None,
    ):
        self.node = node
        self.targets = targets
        self.addresses = addresses
        self.mode = mode
        self.duration_s = duration_s
        self.interval_s = interval_s
        self.log = log
        self.storage_interval_s = storage_interval_s
        self.throttle = throttle or Throttle(None)
        self.clock: RequesterClock = node.requester_clock
        self._subs: dict[str, tuple[StreamTarget, Subscription]] = {}
        self._measuring = False
        self.errors = 0

    # ── Pull ─────────────────────────────────────────────────────────────

    async def _pull(self, target: StreamTarget) -> None:
        loop = asyncio.get_running_loop()
        peer = self.addresses[target.client]
        next_at = loop.time()
        while True:
            try:
                elements, sample = await self.node.fetch_remote_sample(
                    peer, target.sensor, "latest_n", {"n": 1}, stream=target.stream
                )
            except OpsenseError as exc:
                self.errors += 1
                self.log.write("error", t=self.clock.now(), stream=target.stream, code=exc.code, message=str(exc))
            else:
                await self.throttle.wait()
                self.log.write("request", t=sample.t_sent, stream=target.stream, request_id=sample.request_id)
                self.log.write(
                    "response",
                    t=sample.t_received,
                    stream=target.stream,
                    request_id=sample.request_id,
                    sensor=target.sensor,
                    peer=peer,
                    t_sent=sample.t_sent,
                    duration_ms=sample.duration_ms,
                    elements=len(elements),
                )
            next_at += self.interval_s
            await asyncio.sleep(max(0.0, next_at - loop.time()))

    # ── Subscriptions ────────────────────────────────────────────────────

    async def _subscribe_all(self) -> None:
        assert self.mode != "pull"
        for target in self.targets:
            sub = await self.node.subscribe_remote(self.addresses[target.client], target.sensor, self.mode)
            self._subs[sub.id] = (target, sub)
        self.node.inbox.on_element(self._on_element)

    def _on_element(self, subscription_id: str, element: StreamElement, received_at: int) -> None:
        entry = self._subs.get(subscription_id)
        if entry is None or not self._measuring:
            return
        target, _ = entry
        t = self.clock.now()
        # one-way: sensor clock at the producer to requester clock here, may be negative under skew
        self.log.write(
            "deliver",
            t=t,
            stream=target.stream,
            subscription=subscription_id,
            sensor=element.sensor,
            peer=self.addresses[target.client],
            seq=element.seq,
            timestamp=element.timestamp,
            latency_ms=t - element.timestamp,
        )

    async def _unsubscribe_all(self) -> None:
        for sub_id, (target, _) in list(self._subs.items()):
            try:
                await self.node.unsubscribe_remote(self.addresses[target.client], sub_id)
            except OpsenseError as exc:
                logger.debug("Unsubscribe %s failed: %s", sub_id, exc)

    # ── Storage and final counters ───────────────────────────────────────

    async def _poll_storage(self) -> None:
        while True:
            for node_id, address in self.addresses.items():
                try:
                    async with AsyncPeerClient(address, timeout=5) as client:
                        status = await client.status()
                except OpsenseError:
                    continue
                self.log.write("storage", t=self.clock.now(), node=node_id, bytes=status.storage_bytes)
            await asyncio.sleep(self.storage_interval_s)

    async def _collect(self) -> tuple[bool, dict[str, Any]]:
        reachable = True
        work: dict[str, Any] = {self.node.node_id: self.node.work.snapshot()}
        deliveries: list[dict[str, Any]] = []
        async with httpx.AsyncClient(timeout=5) as http:
            for node_id, address in self.addresses.items():
                try:
                    async with AsyncPeerClient(address, timeout=5) as client:
                        work[node_id] = (await client.status()).work
                    r = await http.get(base_url_for(address) + "/deliveries")
                    r.raise_for_status()
                    ours = [d for d in r.json()["deliveries"] if d["subscription"] in self._subs]
                    deliveries.extend({"node": node_id, **d} for d in ours)
                except (OpsenseError, httpx.HTTPError) as exc:
                    logger.warning("Client %s unreachable at the end of the run: %s", node_id, exc)
                    reachable = False
        inbox = [s.model_dump(mode="json") for s in self.node.inbox.stats() if s.subscription in self._subs]
        return reachable, {"work": work, "deliveries": deliveries, "inbox": inbox}

    # ── Run ──────────────────────────────────────────────────────────────

    async def run(self, header: dict[str, Any]) -> dict[str, Any]:
        if self.mode != "pull":
            await self._subscribe_all()
        started = self.clock.now()
        self.log.write(
            "run",
            t=started,
            mode=self.mode,
            duration_s=self.duration_s,
            streams=[t.model_dump() for t in self.targets],
            **header,
        )
        self._measuring = True
        loop = asyncio.get_running_loop()
        tasks = [loop.create_task(self._poll_storage(), name="storage-poll")]
        if self.mode == "pull":
            tasks += [loop.create_task(self._pull(t), name=f"pull-{t.stream}") for t in self.targets]
        await asyncio.sleep(self.duration_s)
        self._measuring = False
        elapsed_ms = self.clock.now() - started
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)

        reachable, counters = await self._collect()
        if self.mode != "pull":
            await self._unsubscribe_all()
        if self.mode == "pull":
            completed = self.node.round_trip_count
        else:
            completed = sum(s["received"] for s in counters["inbox"])
        end = {
            "t": self.clock.now(),
            "elapsed_ms": elapsed_ms,
            "complete": reachable and completed > 0,
            "errors": self.errors,
            **counters,
        }
        self.log.write("end", **end)
        return end


def run_aggregator(plan: RunPlan, log_level: str = "warning") -> int:
    """Entry point of the aggregator process. Returns the process exit code."""
    spec = plan.spec
    agg_cfg = spec.aggregator.model_copy(update={"listen": plan.aggregator_listen, "coordinator": None})
    node = Node(agg_cfg)
    log = EventLogWriter(plan.log_path)
    header = {"run_id": new_id(), "spec": spec.model_dump(mode="json")}
    try:
        with NodeRunner(node, log_level) as runner:
            deadline = time.monotonic() + plan.registration_timeout
            while len(node.coordinator) < len(plan.clients):
                if time.monotonic() > deadline:
                    missing = {c.node_id for c in plan.clients} - {p.node_id for p in node.coordinator.peers()}
                    logger.error("Clients never registered: %s", sorted(missing))
                    now = node.requester_clock.now()
                    log.write("run", t=now, mode=spec.mode, duration_s=0, streams=[], **header)
                    log.write("end", t=now, elapsed_ms=0, complete=False, missing=sorted(missing))
                    return 1
                time.sleep(0.05)
            addresses = {p.node_id: p.address for p in node.coordinator.peers()}
            driver = LoadDriver(
                node,
                stream_targets(spec),
                addresses,
                spec.mode,
                spec.duration,
                spec.sampling_interval / 1000.0,
                log,
                throttle=Throttle(spec.constrained_ops_per_s),
            )
            end = runner.call(driver.run(header), timeout=spec.duration + 120)
    finally:
        log.close()
    return 0 if end["complete"] else 2
