"""
Opsense — Inbox
Receiving side of subscriptions: elements pushed to /deliver or read from a
persistent stream land here, deduplicated by seq, with gap reports and
connection counts kept per subscription.
"""

from __future__ import annotations

import asyncio
import logging
import threading
import time
from collections import deque
from collections.abc import Callable, Hashable
from dataclasses import dataclass, field

import httpx

from .. import config
from ..backoff import ExponentialBackoff
from ..client import PROTOCOL_HEADER, base_url_for
from ..errors import OpsenseError
from ..models import DeliveryMode, InboxStats, StreamElement, Subscription
from ..wire import PATH_STREAM, Frame, FrameType, decode_frame, element_from_body, make_frame

logger = logging.getLogger("opsense.node.inbox")

# (subscription id, element, receive time in epoch ms)
ElementListener = Callable[[str, StreamElement, int], None]


@dataclass
class _Entry:
    subscription: str
    sensor: str = ""
    peer: str = ""
    mode: DeliveryMode = "push"
    received: int = 0
    duplicates: int = 0
    last_seq: int = -1
    gaps: int = 0
    gap_elements: int = 0
    connections: int = 0
    seen_connections: set[Hashable] = field(default_factory=set)
    elements: deque[StreamElement] = field(default_factory=lambda: deque(maxlen=1000))

    def stats(self) -> InboxStats:
        return InboxStats(
            subscription=self.subscription,
            sensor=self.sensor,
            peer=self.peer,
            mode=self.mode,
            received=self.received,
            duplicates=self.duplicates,
            last_seq=self.last_seq,
            gaps=self.gaps,
            gap_elements=self.gap_elements,
            connections=self.connections,
        )


class Inbox:
    def __init__(self, keep: int = 1000):
        self.keep = keep
        self._lock = threading.Lock()
        self._entries: dict[str, _Entry] = {}
        self._listeners: list[ElementListener] = []

    def on_element(self, listener: ElementListener) -> None:
        self._listeners.append(listener)

    def _entry(self, subscription_id: str) -> _Entry:
        entry = self._entries.get(subscription_id)
        if entry is None:
            entry = _Entry(subscription=subscription_id, elements=deque(maxlen=self.keep))
            self._entries[subscription_id] = entry
        return entry

    def expect(self, sub: Subscription, peer: str) -> None:
        """Announce a subscription made on a peer, so its stats exist before the first element."""
        with self._lock:
            entry = self._entry(sub.id)
            entry.sensor, entry.peer, entry.mode = sub.sensor, peer, sub.mode

    def connected(self, subscription_id: str, connection: Hashable | None = None) -> None:
        """Count a transport connection. With a key, repeated keys count once."""
        with self._lock:
            entry = self._entry(subscription_id)
            if connection is not None:
                if connection in entry.seen_connections:
                    return
                entry.seen_connections.add(connection)
            entry.connections += 1

    def receive(self, frame: Frame, received_at: int | None = None) -> Frame:
        """Record a deliver frame and build its deliver_ack. Duplicates are acknowledged but not kept."""
        element = element_from_body(frame.body)
        now = received_at if received_at is not None else time.time_ns() // 1_000_000
        with self._lock:
            entry = self._entry(frame.id)
            if not entry.sensor:
                entry.sensor = element.sensor
            fresh = element.seq > entry.last_seq
            if fresh:
                if frame.gap:
                    entry.gaps += 1
                    entry.gap_elements += frame.gap
                entry.received += 1
                entry.last_seq = element.seq
                entry.elements.append(element)
            else:
                entry.duplicates += 1
        if fresh:
            for listener in self._listeners:
                try:
                    listener(frame.id, element, now)
                except Exception:
                    logger.exception("Inbox listener failed for %s", frame.id)
        return make_frame(FrameType.DELIVER_ACK, {"subscription": frame.id, "seq": element.seq}, id=frame.id)

    def elements(self, subscription_id: str) -> list[StreamElement]:
        with self._lock:
            entry = self._entries.get(subscription_id)
            return list(entry.elements) if entry else []

    def stats(self) -> list[InboxStats]:
        with self._lock:
            return [e.stats() for e in self._entries.values()]

    def get(self, subscription_id: str) -> InboxStats | None:
        with self._lock:
            entry = self._entries.get(subscription_id)
            return entry.stats() if entry else None


class StreamConsumer:
    """
    Holds one persistent stream open to a peer and feeds its frames into the
    inbox. Broken or ended connections are reopened with backoff until stop().
    """

    def __init__(
        self,
        peer: str,
        subscription: Subscription,
        inbox: Inbox,
        backoff: ExponentialBackoff | None = None,
        transport: httpx.AsyncBaseTransport | None = None,
        heartbeat_s: float = config.HEARTBEAT_S,
    ):
        self.peer = peer
        self.subscription = subscription
        self.inbox = inbox
        self._backoff = backoff or ExponentialBackoff()
        self._transport = transport
        # a silent peer misses several heartbeats before the read times out
        self._timeout = httpx.Timeout(config.FETCH_TIMEOUT_S, read=heartbeat_s * 3)
        self._stopped = asyncio.Event()
        self.heartbeats = 0
        self.reconnects = 0

    def stop(self) -> None:
        self._stopped.set()

    async def run(self) -> None:
        url = PATH_STREAM.format(name=self.subscription.sensor)
        params = {"subscription": self.subscription.id}
        self.inbox.expect(self.subscription, self.peer)
        async with httpx.AsyncClient(
            base_url=base_url_for(self.peer),
            headers={PROTOCOL_HEADER: config.PROTOCOL_VERSION},
            timeout=self._timeout,
            transport=self._transport,
        ) as client:
            while not self._stopped.is_set():
                try:
                    async with client.stream("GET", url, params=params) as response:
                        if response.status_code == 404:
                            logger.warning("Stream %s no longer exists on %s", self.subscription.id, self.peer)
                            return
                        if response.status_code != 200:
                            raise OpsenseError(f"stream refused with HTTP {response.status_code}")
                        self.inbox.connected(self.subscription.id)
                        self._backoff.reset()
                        await self._consume(response)
                except (httpx.HTTPError, OpsenseError) as exc:
                    logger.debug("Stream %s from %s broke: %s", self.subscription.id, self.peer, exc)
                if self._stopped.is_set():
                    break
                self.reconnects += 1
                try:
                    await asyncio.wait_for(self._stopped.wait(), timeout=self._backoff.next_delay())
                except asyncio.TimeoutError:
                    pass

    async def _consume(self, response: httpx.Response) -> None:
        async for line in response.aiter_lines():
            if self._stopped.is_set():
                return
            if not line.strip():
                continue
            frame = decode_frame(line)
            if frame.type == FrameType.DELIVER:
                self.inbox.receive(frame)
            elif frame.type == FrameType.STATUS:
                self.heartbeats += 1
            elif frame.type == FrameType.ERROR:
                raise OpsenseError(frame.body.get("message", "stream error"), code=frame.body.get("code"))
