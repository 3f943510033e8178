"""
Opsense — Node engine
The per-device engine: virtual sensors with their sampling tasks, the query
queue, the service manager, the inbox and the coordinator registry.

Every node is both a data producer and a possible aggregator: it answers
queries about its own sensors while fetching from or subscribing to peers.
All async methods run on the node's event loop; NodeRunner.call() commands
a running node from any other thread.
"""

from __future__ import annotations

import asyncio
import logging
import time
from collections import deque
from collections.abc import Callable
from concurrent.futures import Future
from pathlib import Path
from typing import Any

from .. import config
from ..client import AsyncPeerClient
from ..errors import BadRequest, ConfigInvalid, OpsenseError, SensorUnknown
from ..events import ELEMENT_EVICTED, EventBus, WorkCounter
from ..models import (
    DeliveryMode,
    NodeConfig,
    NodeStatus,
    QueryJob,
    QueryKind,
    QueryResult,
    RoundTripSample,
    SensorAnnouncement,
    StreamElement,
    Subscription,
    ValidationResult,
    VirtualSensorConfig,
)
from ..processing import processor_names
from ..sources import DiscoveryResult, PluginRegistry
from ..storage import SpillLog, WindowStore, storage_total
from ..validation import RegistryView, validate_config, validate_node_config
from ..wire import new_id
from .coordinator import Coordinator, Registrar
from .inbox import Inbox, StreamConsumer
from .queries import QueryQueue, Throttle
from .sensor import VirtualSensor
from .service import ClientFactory, ServiceManager

logger = logging.getLogger("opsense.node.engine")

Clock = Callable[[], int]
PeerClientFactory = Callable[[str], AsyncPeerClient]
RoundTripListener = Callable[[RoundTripSample], None]


def wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


class RequesterClock:
    """Fractional epoch ms anchored once to the wall clock, advanced by the monotonic clock."""

    def __init__(self) -> None:
        self._wall = time.time() * 1000.0
        self._mono = time.perf_counter()

    def now(self) -> float:
        return self._wall + (time.perf_counter() - self._mono) * 1000.0


def _config_invalid(result: ValidationResult, what: str) -> ConfigInvalid:
    summary = "; ".join(f"{v.path}: {v.code}" if v.path else v.code for v in result.violations)
    return ConfigInvalid(
        f"{what} is invalid: {summary}",
        detail=[v.model_dump() for v in result.violations],
    )


class Node:
    def __init__(
        self,
        cfg: NodeConfig,
        registry: PluginRegistry | None = None,
        clock: Clock = wall_clock_ms,
        push_client_factory: ClientFactory | None = None,
        peer_client_factory: PeerClientFactory = AsyncPeerClient,
    ):
        self.config = cfg
        self.node_id = cfg.node_id
        self.address = cfg.listen
        self.clock = clock
        self.bus = EventBus()
        self.work = WorkCounter(self.bus)
        if registry is None:
            registry = PluginRegistry(cfg.plugin_dir or config.PLUGIN_DIR)
            registry.discover()
        self.registry = registry

        result = validate_node_config(cfg, self.registry_view())
        if not result.ok:
            raise _config_invalid(result, f"node config {cfg.node_id!r}")

        spill_dir = cfg.spill_dir or config.SPILL_DIR
        self._spill_dir = Path(spill_dir) if spill_dir else None
        self.sensors: dict[str, VirtualSensor] = {}
        for sensor_cfg in cfg.sensors:
            self.sensors[sensor_cfg.name] = self._build_sensor(sensor_cfg)

        self.queue = QueryQueue(self._execute, cfg.queue_max, self.bus, Throttle(cfg.constrained_ops_per_s))
        self.service = ServiceManager(self.store, self.bus, client_factory=push_client_factory)
        self.inbox = Inbox()
        self.coordinator = Coordinator(self.bus)
        self._peer_client_factory = peer_client_factory
        self.registrar: Registrar | None = None
        if cfg.coordinator:
            self.registrar = Registrar(
                cfg.coordinator,
                cfg.node_id,
                address=lambda: self.address,
                sensors=self.announce,
                client_factory=peer_client_factory,
            )

        self.requester_clock = RequesterClock()
        # newest samples only; round_trip_count keeps the total
        self.round_trips: deque[RoundTripSample] = deque(maxlen=config.ROUND_TRIP_KEEP)
        self.round_trip_count = 0
        self._round_trip_listeners: list[RoundTripListener] = []
        self._pending: dict[str, tuple[Future[QueryResult], float]] = {}
        self._sampling: dict[str, asyncio.Task] = {}
        self._background: list[asyncio.Task] = []
        self._consumers: dict[str, tuple[StreamConsumer, asyncio.Task]] = {}
        self.running = False

    # ── Sensors ──────────────────────────────────────────────────────────

    def registry_view(self) -> RegistryView:
        return RegistryView(plugins=self.registry.names(), processors=processor_names())

    def _build_sensor(self, cfg: VirtualSensorConfig, store: WindowStore | None = None) -> VirtualSensor:
        source = self.registry.instantiate(cfg.source.plugin, cfg.source.params)
        if store is None:
            spill = None
            if self._spill_dir is not None:
                spill = SpillLog(self._spill_dir / f"{self.node_id}-{cfg.name}.log")
            store = WindowStore(cfg.name, cfg.history_size, spill)
        elif store.capacity != cfg.history_size:
            store.resize(cfg.history_size)
        return VirtualSensor(cfg, source, store, self.bus, context=self)

    def _sensor(self, name: str) -> VirtualSensor:
        try:
            return self.sensors[name]
        except KeyError:
            raise SensorUnknown(f"unknown sensor {name!r}") from None

    def store(self, name: str) -> WindowStore | None:
        sensor = self.sensors.get(name)
        return sensor.store if sensor else None

    def latest(self, sensor: str) -> StreamElement | None:
        """Processing context: newest element of another local sensor."""
        store = self.store(sensor)
        return store.latest() if store else None

    def announce(self) -> list[SensorAnnouncement]:
        return [
            SensorAnnouncement(name=s.name, output_schema=s.config.output_schema)
            for s in sorted(self.sensors.values(), key=lambda s: s.name)
        ]

    def tick(self, name: str, now: int | None = None) -> StreamElement | None:
        """One acquisition step for one sensor; wakes its subscribers when something was stored."""
        sensor = self._sensor(name)
        element = sensor.acquire(self.clock() if now is None else now)
        if element is not None:
            self.service.notify(name)
        return element

    def add_sensor(self, cfg: VirtualSensorConfig) -> VirtualSensor:
        if cfg.name in self.sensors:
            raise ConfigInvalid(
                f"sensor {cfg.name!r} already exists",
                detail=[{"code": "SENSOR_NAME_DUPLICATE", "message": cfg.name, "path": "name"}],
            )
        result = validate_config(cfg, self.registry_view())
        if not result.ok:
            raise _config_invalid(result, f"sensor {cfg.name!r}")
        sensor = self._build_sensor(cfg)
        self.sensors[cfg.name] = sensor
        if self.running:
            self._start_sampling(sensor)
        self._sensors_changed()
        logger.info("Sensor %s added (%s)", cfg.name, cfg.source.plugin)
        return sensor

    def update_sensor(self, cfg: VirtualSensorConfig) -> VirtualSensor:
        """Replace a sensor's config. The window and its seq numbering carry over."""
        old = self._sensor(cfg.name)
        result = validate_config(cfg, self.registry_view())
        if not result.ok:
            raise _config_invalid(result, f"sensor {cfg.name!r}")
        sensor = self._build_sensor(cfg, store=old.store)
        sensor.last_timestamp = old.last_timestamp
        self._stop_sampling(cfg.name)
        self.sensors[cfg.name] = sensor
        if self.running:
            self._start_sampling(sensor)
        self._sensors_changed()
        logger.info("Sensor %s updated", cfg.name)
        return sensor

    def remove_sensor(self, name: str) -> None:
        sensor = self._sensor(name)
        self._stop_sampling(name)
        self.service.drop_sensor(name)
        del self.sensors[name]
        if sensor.store.spill is not None:
            sensor.store.spill.close()
        self._sensors_changed()
        logger.info("Sensor %s removed", name)

    def set_history_size(self, name: str, size: int) -> list[StreamElement]:
        """Resize a sensor's window at runtime; returns what a shrink evicted."""
        sensor = self._sensor(name)
        evicted = sensor.store.resize(size)
        sensor.config = sensor.config.model_copy(update={"history_size": size})
        for e in evicted:
            self.bus.emit(ELEMENT_EVICTED, {"sensor": name, "seq": e.seq})
        return evicted

    def rediscover_plugins(self) -> DiscoveryResult:
        """Explicit re-scan of the plugin directory. Running sensors keep their instances."""
        return self.registry.discover()

    def _sensors_changed(self) -> None:
        if self.registrar is not None:
            self.registrar.refresh()

    # ── Sampling ─────────────────────────────────────────────────────────

    def _start_sampling(self, sensor: VirtualSensor) -> None:
        loop = asyncio.get_running_loop()
        self._sampling[sensor.name] = loop.create_task(self._sample_loop(sensor), name=f"sample-{sensor.name}")

    def _stop_sampling(self, name: str) -> None:
        task = self._sampling.pop(name, None)
        if task is not None:
            task.cancel()

    async def _sample_loop(self, sensor: VirtualSensor) -> None:
        loop = asyncio.get_running_loop()
        interval = sensor.config.sampling_interval / 1000.0
        next_at = loop.time()
        while sensor.active:
            try:
                element = sensor.acquire(self.clock())
            except Exception:
                logger.exception("%s: sampling step failed", sensor.name)
                element = None
            if element is not None:
                self.service.notify(sensor.name)
            next_at += interval
            delay = next_at - loop.time()
            if delay < 0:
                # overran: skip the missed ticks instead of bursting
                next_at = loop.time()
                delay = 0.0
            await asyncio.sleep(delay)
        logger.info("%s: sampling stopped (failed=%s, exhausted=%s)", sensor.name, sensor.failed, sensor.exhausted)

    # ── Queries ──────────────────────────────────────────────────────────

    def _execute(self, job: QueryJob) -> QueryResult:
        store = self._sensor(job.sensor).store
        if job.kind == "latest_n":
            elements = store.query_latest(int(job.params.get("n", 1)))
        else:
            try:
                from_ts, to_ts = int(job.params["from"]), int(job.params["to"])
            except (KeyError, TypeError, ValueError) as exc:
                raise BadRequest(f"range query needs integer 'from' and 'to': {exc}") from exc
            elements = store.query_range(from_ts, to_ts)
        server_ms = max(0.0, time.time() * 1000.0 - job.enqueued_at)
        return QueryResult(job_id=job.id, sensor=job.sensor, elements=tuple(elements), server_ms=server_ms)

    def make_job(self, sensor: str, kind: QueryKind, params: dict[str, Any], requester: str = "") -> QueryJob:
        return QueryJob(
            id=new_id(), sensor=sensor, kind=kind, params=params, enqueued_at=wall_clock_ms(), requester=requester
        )

    def enqueue_query(self, job: QueryJob) -> str:
        """Queue a job; collect the answer with result(job_id). Raises QueueFull."""
        self._expire_results()
        self._pending[job.id] = (self.queue.enqueue(job), time.monotonic() + config.RESULT_TTL_S)
        return job.id

    def _expire_results(self) -> None:
        now = time.monotonic()
        for job_id, (future, expires) in list(self._pending.items()):
            if future.done() and expires < now:
                del self._pending[job_id]

    def process_queries(self, limit: int | None = None) -> int:
        return self.queue.process_queries(limit)

    def result(self, job_id: str, timeout: float | None = None) -> QueryResult:
        """Answer of an enqueued job, readable once. Unread answers expire after RESULT_TTL_S."""
        try:
            future, _ = self._pending.pop(job_id)
        except KeyError:
            raise BadRequest(f"unknown or expired job {job_id!r}") from None
        return future.result(timeout)

    async def query(self, sensor: str, kind: QueryKind, params: dict[str, Any], requester: str = "") -> QueryResult:
        """Enqueue and await the answer. Requires the drain task (start())."""
        future = self.queue.enqueue(self.make_job(sensor, kind, params, requester))
        return await asyncio.wrap_future(future)

    # ── Peers ────────────────────────────────────────────────────────────

    def on_round_trip(self, listener: RoundTripListener) -> None:
        self._round_trip_listeners.append(listener)

    async def fetch_remote(
        self,
        peer: str,
        sensor: str,
        kind: QueryKind = "latest_n",
        params: dict[str, Any] | None = None,
        stream: str = "",
    ) -> list[StreamElement]:
        """
        Query a peer and record the round trip on this node's clock.
        Raises PeerUnreachable or RequestTimeout; the error side records nothing.
        """
        elements, _ = await self.fetch_remote_sample(peer, sensor, kind, params, stream)
        return elements

    async def fetch_remote_sample(
        self,
        peer: str,
        sensor: str,
        kind: QueryKind = "latest_n",
        params: dict[str, Any] | None = None,
        stream: str = "",
    ) -> tuple[list[StreamElement], RoundTripSample]:
        params = params or {}
        request_id = new_id()
        t_sent = self.requester_clock.now()
        async with self._peer_client_factory(peer) as client:
            if kind == "latest_n":
                result = await client.latest(sensor, int(params.get("n", 1)))
            else:
                result = await client.range(sensor, int(params["from"]), int(params["to"]))
        t_received = self.requester_clock.now()
        sample = RoundTripSample(
            request_id=request_id,
            stream=stream,
            sensor=sensor,
            peer=peer,
            t_sent=t_sent,
            t_received=t_received,
            duration_ms=t_received - t_sent,
        )
        self.round_trips.append(sample)
        self.round_trip_count += 1
        for listener in self._round_trip_listeners:
            try:
                listener(sample)
            except Exception:
                logger.exception("Round-trip listener failed")
        return list(result.elements), sample

    def subscribe(
        self, sensor: str, subscriber: str, mode: DeliveryMode, persistent_delivery: bool = True
    ) -> Subscription:
        return self.service.subscribe(sensor, subscriber, mode, persistent_delivery)

    async def subscribe_remote(
        self, peer: str, sensor: str, mode: DeliveryMode, persistent_delivery: bool = True
    ) -> Subscription:
        """Subscribe this node to a peer's sensor; persistent streams get a consumer task."""
        async with self._peer_client_factory(peer) as client:
            sub = await client.subscribe(sensor, self.address, mode, persistent_delivery)
        self.inbox.expect(sub, peer)
        if mode == "persistent_stream":
            await self.attach_stream(peer, sub)
        return sub

    async def attach_stream(self, peer: str, sub: Subscription) -> StreamConsumer:
        """(Re)open the consumer of a persistent-stream subscription held on `peer`; it resumes from the cursor."""
        if sub.id in self._consumers:
            return self._consumers[sub.id][0]
        consumer = StreamConsumer(peer, sub, self.inbox, heartbeat_s=self.service.heartbeat_s)
        task = asyncio.get_running_loop().create_task(consumer.run(), name=f"stream-{sub.id}")
        self._consumers[sub.id] = (consumer, task)
        return consumer

    async def detach_stream(self, subscription_id: str) -> bool:
        """Close the local consumer only; the subscription stays on the peer."""
        entry = self._consumers.pop(subscription_id, None)
        if entry is None:
            return False
        consumer, task = entry
        consumer.stop()
        task.cancel()
        await asyncio.gather(task, return_exceptions=True)
        return True

    async def unsubscribe_remote(self, peer: str, subscription_id: str) -> bool:
        await self.detach_stream(subscription_id)
        async with self._peer_client_factory(peer) as client:
            return await client.unsubscribe(subscription_id)

    async def announce_now(self) -> None:
        """Register with the coordinator once, outside the retry loop."""
        if self.registrar is None:
            raise BadRequest("no coordinator configured")
        await self.registrar.register_once()

    # ── Lifecycle ────────────────────────────────────────────────────────

    async def start(self) -> None:
        if self.running:
            return
        self.running = True
        loop = asyncio.get_running_loop()
        self._background.append(loop.create_task(self.queue.run(), name="query-drain"))
        for sensor in self.sensors.values():
            self._start_sampling(sensor)
        self.service.start()
        if self.registrar is not None:
            self._background.append(loop.create_task(self.registrar.run(), name="registrar"))
        logger.info("Node %s started on %s with %d sensors", self.node_id, self.address, len(self.sensors))

    async def stop(self) -> None:
        if not self.running:
            return
        self.running = False
        tasks = list(self._sampling.values()) + self._background + [t for _, t in self._consumers.values()]
        for consumer, _ in self._consumers.values():
            consumer.stop()
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        self._sampling.clear()
        self._background.clear()
        self._consumers.clear()
        await self.service.stop()
        for sensor in self.sensors.values():
            if sensor.store.spill is not None:
                sensor.store.spill.close()
        logger.info("Node %s stopped", self.node_id)

    # ── Status ───────────────────────────────────────────────────────────

    def status(self) -> NodeStatus:
        sensors = [s.status() for s in sorted(self.sensors.values(), key=lambda s: s.name)]
        work = self.work.snapshot()
        return NodeStatus(
            node_id=self.node_id,
            address=self.address,
            active_sensors=sum(1 for s in self.sensors.values() if s.active),
            sensors=tuple(sensors),
            queue_depth=self.queue.depth,
            queries_answered=self.queue.answered,
            subscriptions=len(self.service.subscriptions),
            gaps_reported=work["sending"]["gaps_reported"],
            storage_bytes=storage_total(s.store for s in self.sensors.values()),
            pending_registrations=int(self.registrar is not None and self.registrar.pending),
            registered_peers=len(self.coordinator),
            work=work,
        )


def load_node(cfg: NodeConfig, **kwargs: Any) -> Node:
    """Build a node, turning a registry failure into the config error the CLI reports."""
    try:
        return Node(cfg, **kwargs)
    except ConfigInvalid:
        raise
    except OpsenseError as exc:
        raise ConfigInvalid(f"node config {cfg.node_id!r}: {exc}", detail=exc.detail) from exc
