"""
Opsense — Service Manager
Subscriptions and their delivery: push (fresh connection per element) and
persistent streams (one long-lived connection carrying many frames).

The sensor's own window is the delivery buffer. A subscription's cursor is
the last acknowledged seq; anything evicted before it was acknowledged is
reported in the `gap` field of the next frame.
"""

from __future__ import annotations

import asyncio
import logging
import threading
import time
from collections import OrderedDict
from collections.abc import AsyncIterator, Callable
from dataclasses import dataclass

import httpx

from .. import config
from ..backoff import ExponentialBackoff
from ..errors import BadRequest, SensorUnknown, SubscriptionUnknown
from ..events import CONNECTION_OPENED, DELIVERY_ACKED, DELIVERY_GAP, EventBus
from ..models import DeliveryMode, StreamElement, Subscription
from ..storage import WindowStore
from ..wire import (
    MEDIA_TYPE,
    PATH_DELIVER,
    Frame,
    FrameType,
    decode_frame,
    deliver_frame,
    element_size,
    encode_frame,
    make_frame,
    new_id,
)

logger = logging.getLogger("opsense.node.service")

ClientFactory = Callable[[], httpx.AsyncClient]
StoreLookup = Callable[[str], WindowStore | None]


def now_ms() -> int:
    return time.time_ns() // 1_000_000


class SensorSignal:
    """
    Wakes delivery tasks when a sensor stores an element. Take `current()`
    BEFORE reading the store, then wait on it: a notify in between is never lost.
    notify() may come from any thread; it is handed to the waiters' loop.
    """

    def __init__(self) -> None:
        self._event = asyncio.Event()
        self._loop: asyncio.AbstractEventLoop | None = None

    def current(self) -> asyncio.Event:
        self._loop = asyncio.get_running_loop()
        return self._event

    def notify(self) -> None:
        loop = self._loop
        if loop is None or _running_loop() is loop:
            self._fire()
        elif not loop.is_closed():
            loop.call_soon_threadsafe(self._fire)

    def _fire(self) -> None:
        event, self._event = self._event, asyncio.Event()
        event.set()


def _running_loop() -> asyncio.AbstractEventLoop | None:
    try:
        return asyncio.get_running_loop()
    except RuntimeError:
        return None


@dataclass
class DeliveryStats:
    attempts: int = 0
    delivered: int = 0
    connections: int = 0
    payload_bytes: int = 0
    wire_bytes: int = 0
    gaps: int = 0

    @property
    def overhead_per_element(self) -> float:
        """Bytes on the wire beyond the element payload, per delivered element."""
        if not self.delivered:
            return 0.0
        return (self.wire_bytes - self.payload_bytes) / self.delivered


HeaderList = list[tuple[bytes, bytes]]


def _header_bytes(headers: HeaderList) -> int:
    # "name: value\r\n" per header, then the blank line
    return sum(len(k) + len(v) + 4 for k, v in headers) + 2


def request_head_bytes(method: str, target: bytes | str, headers: HeaderList) -> int:
    """Request line plus headers as sent by HTTP/1.1."""
    return len(method) + 1 + len(target) + len(" HTTP/1.1\r\n") + _header_bytes(headers)


def response_head_bytes(status_code: int, reason: str, headers: HeaderList) -> int:
    return len(f"HTTP/1.1 {status_code} {reason}\r\n") + _header_bytes(headers)


def chunk_bytes(payload: int) -> int:
    """One chunk of chunked transfer encoding: hex length line, data, CRLF."""
    return len(f"{payload:x}\r\n") + payload + 2


def _http_request_bytes(request: httpx.Request) -> int:
    return request_head_bytes(request.method, request.url.raw_path, request.headers.raw) + len(request.content)


def _http_response_bytes(response: httpx.Response) -> int:
    head = response_head_bytes(response.status_code, response.reason_phrase, response.headers.raw)
    return head + len(response.content)


class ServiceManager:
    """Subscription table (mutations serialized by a lock) plus one delivery task per push subscription."""

    def __init__(
        self,
        stores: StoreLookup,
        bus: EventBus,
        client_factory: ClientFactory | None = None,
        heartbeat_s: float = config.HEARTBEAT_S,
        backoff_factory: Callable[[], ExponentialBackoff] = ExponentialBackoff,
    ):
        self._stores = stores
        self._bus = bus
        self._client_factory = client_factory or (lambda: httpx.AsyncClient(timeout=config.FETCH_TIMEOUT_S))
        self.heartbeat_s = heartbeat_s
        self._backoff_factory = backoff_factory
        self._lock = threading.Lock()
        self.subscriptions: dict[str, Subscription] = {}
        self.stats: dict[str, DeliveryStats] = {}
        # counters of ended subscriptions, oldest dropped first
        self.closed: OrderedDict[str, DeliveryStats] = OrderedDict()
        self._dropped: dict[str, int] = {}
        self._signals: dict[str, SensorSignal] = {}
        self._tasks: dict[str, asyncio.Task] = {}
        self._running = False

    # ── Table ────────────────────────────────────────────────────────────

    def signal(self, sensor: str) -> SensorSignal:
        if sensor not in self._signals:
            self._signals[sensor] = SensorSignal()
        return self._signals[sensor]

    def notify(self, sensor: str) -> None:
        """Called by the sampling task after a store."""
        sig = self._signals.get(sensor)
        if sig is not None:
            sig.notify()

    def _store(self, sensor: str) -> WindowStore:
        store = self._stores(sensor)
        if store is None:
            raise SensorUnknown(f"unknown sensor {sensor!r}")
        return store

    def subscribe(
        self,
        sensor: str,
        subscriber: str,
        mode: DeliveryMode,
        persistent_delivery: bool = True,
        subscription_id: str | None = None,
    ) -> Subscription:
        """Register interest from the next stored element onward."""
        store = self._store(sensor)
        sub = Subscription(
            id=subscription_id or new_id(),
            sensor=sensor,
            subscriber=subscriber,
            mode=mode,
            persistent_delivery=persistent_delivery,
            created_at=now_ms(),
            cursor=store.latest_seq,
        )
        with self._lock:
            self.subscriptions[sub.id] = sub
            self.stats[sub.id] = DeliveryStats()
            self._dropped[sub.id] = 0
        logger.info("Subscription %s: %s -> %s (%s)", sub.id, sensor, subscriber, mode)
        if mode == "push" and self._running:
            self._start_push(sub)
        return sub

    def unsubscribe(self, subscription_id: str) -> bool:
        with self._lock:
            sub = self.subscriptions.pop(subscription_id, None)
            self._dropped.pop(subscription_id, None)
            stats = self.stats.pop(subscription_id, None)
            if stats is not None:
                self.closed[subscription_id] = stats
                while len(self.closed) > config.CLOSED_STATS_KEEP:
                    self.closed.popitem(last=False)
        task = self._tasks.pop(subscription_id, None)
        if task is not None:
            task.cancel()
        if sub is not None:
            self.signal(sub.sensor).notify()
        return sub is not None

    def drop_sensor(self, sensor: str) -> None:
        """Removing a sensor ends its subscriptions."""
        for sub in [s for s in self.subscriptions.values() if s.sensor == sensor]:
            self.unsubscribe(sub.id)

    def delivery_stats(self, subscription_id: str) -> DeliveryStats:
        """Counters of a live or recently ended subscription."""
        stats = self.stats.get(subscription_id) or self.closed.get(subscription_id)
        if stats is None:
            raise SubscriptionUnknown(f"no delivery counters for {subscription_id!r}")
        return stats

    def get(self, subscription_id: str) -> Subscription:
        try:
            return self.subscriptions[subscription_id]
        except KeyError:
            raise SubscriptionUnknown(f"unknown subscription {subscription_id!r}") from None

    def _advance(self, sub: Subscription, seq: int) -> None:
        with self._lock:
            if seq > sub.cursor:
                sub.cursor = seq

    def _take_gap(self, sub: Subscription, evicted: int) -> int:
        """Elements this subscriber will never see: evicted from the window plus dropped deliveries."""
        with self._lock:
            gap = evicted + self._dropped.get(sub.id, 0)
            self._dropped[sub.id] = 0
        if gap:
            self.delivery_stats(sub.id).gaps += 1
            self._bus.emit(DELIVERY_GAP, {"subscription": sub.id, "sensor": sub.sensor, "gap": gap})
        return gap

    def pending(self, sub: Subscription, limit: int | None = None) -> tuple[int, list[StreamElement]]:
        return self._store(sub.sensor).elements_after(sub.cursor, limit)

    # ── Lifecycle ────────────────────────────────────────────────────────

    def start(self) -> None:
        self._running = True
        for sub in list(self.subscriptions.values()):
            if sub.mode == "push" and sub.id not in self._tasks:
                self._start_push(sub)

    async def stop(self) -> None:
        self._running = False
        tasks = list(self._tasks.values())
        self._tasks.clear()
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)

    def _start_push(self, sub: Subscription) -> None:
        self._tasks[sub.id] = asyncio.get_running_loop().create_task(
            self._push_loop(sub), name=f"push-{sub.id}"
        )

    # ── Push ─────────────────────────────────────────────────────────────

    async def push_once(self, sub: Subscription, frame: Frame, payload: int) -> bool:
        """
        Deliver one frame over a fresh connection to the subscriber's /deliver
        endpoint. True only on a matching deliver_ack.
        """
        stats = self.delivery_stats(sub.id)
        stats.attempts += 1
        url = f"http://{sub.subscriber}{PATH_DELIVER}"
        try:
            async with self._client_factory() as client:
                response = await client.post(url, content=encode_frame(frame), headers={"Content-Type": MEDIA_TYPE})
        except httpx.HTTPError as exc:
            logger.debug("Push %s to %s failed: %s", sub.id, sub.subscriber, exc)
            return False
        stats.connections += 1
        self._bus.emit(CONNECTION_OPENED, {"subscription": sub.id, "mode": "push"})
        if response.status_code != 200:
            return False
        try:
            ack = decode_frame(response.content)
        except Exception:
            return False
        if ack.type != FrameType.DELIVER_ACK or ack.body.get("seq") != frame.body.get("seq"):
            return False
        stats.delivered += 1
        stats.payload_bytes += payload
        stats.wire_bytes += _http_request_bytes(response.request) + _http_response_bytes(response)
        return True

    async def _push_loop(self, sub: Subscription) -> None:
        backoff = self._backoff_factory()
        signal = self.signal(sub.sensor)
        carried_gap = 0
        while sub.id in self.subscriptions:
            wake = signal.current()
            evicted, pending = self.pending(sub, limit=1)
            if not pending:
                await wake.wait()
                continue
            element = pending[0]
            gap = carried_gap or self._take_gap(sub, evicted)
            frame = deliver_frame(element, sub.id, gap)
            if await self.push_once(sub, frame, element_size(element)):
                carried_gap = 0
                backoff.reset()
                self._advance(sub, element.seq)
                self._bus.emit(
                    DELIVERY_ACKED,
                    {"subscription": sub.id, "seq": element.seq, "bytes": element_size(element)},
                )
            elif sub.persistent_delivery:
                # keep the gap for the retry of this same element
                carried_gap = gap
                await asyncio.sleep(backoff.next_delay())
            else:
                carried_gap = 0
                with self._lock:
                    self._dropped[sub.id] = self._dropped.get(sub.id, 0) + 1 + gap
                self._advance(sub, element.seq)

    # ── Persistent stream ────────────────────────────────────────────────

    def open_stream(self, subscription_id: str) -> Subscription:
        """
        A subscriber (re)connects its persistent stream. Without
        persistent_delivery the backlog is skipped and reported as a gap.
        """
        sub = self.get(subscription_id)
        if sub.mode != "persistent_stream":
            raise BadRequest(f"subscription {sub.id} is in {sub.mode} mode")
        if not sub.persistent_delivery:
            latest = self._store(sub.sensor).latest_seq
            if latest > sub.cursor:
                with self._lock:
                    self._dropped[sub.id] = self._dropped.get(sub.id, 0) + latest - sub.cursor
                    sub.cursor = latest
        self.delivery_stats(sub.id).connections += 1
        self._bus.emit(CONNECTION_OPENED, {"subscription": sub.id, "mode": "persistent_stream"})
        return sub

    def record_handshake(self, subscription_id: str, nbytes: int) -> None:
        """Wire bytes of a stream connection that carry no element: request, response head, subscribe_ack."""
        self.delivery_stats(subscription_id).wire_bytes += nbytes

    async def stream_frames(self, sub: Subscription) -> AsyncIterator[str]:
        """
        Frame flow of one persistent stream connection. A frame counts as
        acknowledged once the transport write returned (the generator resumed).
        Emits a status heartbeat after heartbeat_s of silence.
        """
        signal = self.signal(sub.sensor)
        stats = self.delivery_stats(sub.id)
        while sub.id in self.subscriptions:
            wake = signal.current()
            evicted, pending = self.pending(sub)
            if pending:
                gap = self._take_gap(sub, evicted)
                for element in pending:
                    line = encode_frame(deliver_frame(element, sub.id, gap))
                    gap = 0
                    yield line
                    payload = element_size(element)
                    stats.delivered += 1
                    stats.attempts += 1
                    stats.payload_bytes += payload
                    stats.wire_bytes += chunk_bytes(len(line.encode("utf-8")))
                    self._advance(sub, element.seq)
                    self._bus.emit(DELIVERY_ACKED, {"subscription": sub.id, "seq": element.seq, "bytes": payload})
                continue
            try:
                await asyncio.wait_for(wake.wait(), timeout=self.heartbeat_s)
            except asyncio.TimeoutError:
                heartbeat = make_frame(
                    FrameType.STATUS,
                    {"heartbeat": True, "sensor": sub.sensor, "cursor": sub.cursor},
                    id=sub.id,
                )
                line = encode_frame(heartbeat)
                yield line
                stats.wire_bytes += chunk_bytes(len(line.encode("utf-8")))
