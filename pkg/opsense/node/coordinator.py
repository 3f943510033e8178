"""
Opsense — Coordinator
Registry of peers and their sensor lists, served by any node, plus the
client-side registrar that keeps this node announced to its coordinator.
"""

from __future__ import annotations

import asyncio
import logging
import threading
import time
from collections.abc import Callable

from ..backoff import ExponentialBackoff
from ..client import AsyncPeerClient
from ..errors import BadRequest, OpsenseError, PeerUnreachable, QueueFull, RequestTimeout
from ..events import PEER_REGISTERED, EventBus
from ..models import PeerRegistration, SensorAnnouncement
from ..validation import valid_node_id

logger = logging.getLogger("opsense.node.coordinator")

# Worth retrying: the coordinator may come back. Anything else is a rejection.
RETRYABLE = (PeerUnreachable, RequestTimeout, QueueFull)


class Coordinator:
    """One entry per node_id; re-registration replaces the sensor list."""

    def __init__(self, bus: EventBus | None = None):
        self._bus = bus or EventBus()
        self._lock = threading.Lock()
        self._peers: dict[str, PeerRegistration] = {}

    def register(self, node_id: str, address: str, sensors: list[SensorAnnouncement]) -> PeerRegistration:
        if not valid_node_id(node_id):
            raise BadRequest(f"invalid node_id {node_id!r}")
        if not sensors:
            raise BadRequest(f"node {node_id} registered without sensors")
        entry = PeerRegistration(
            node_id=node_id,
            address=address,
            sensors=tuple(sensors),
            registered_at=time.time_ns() // 1_000_000,
        )
        with self._lock:
            replaced = node_id in self._peers
            self._peers[node_id] = entry
        verb = "Re-registered" if replaced else "Registered"
        logger.info("%s %s at %s with %d sensors", verb, node_id, address, len(sensors))
        self._bus.emit(PEER_REGISTERED, {"node_id": node_id, "sensors": len(sensors), "replaced": replaced})
        return entry

    def peers(self) -> list[PeerRegistration]:
        with self._lock:
            return sorted(self._peers.values(), key=lambda p: p.node_id)

    def get(self, node_id: str) -> PeerRegistration | None:
        with self._lock:
            return self._peers.get(node_id)

    def __len__(self) -> int:
        return len(self._peers)


ClientFactory = Callable[[str], AsyncPeerClient]


class Registrar:
    """
    Keeps this node registered with its coordinator. Unreachable coordinators
    are retried forever with backoff; local sensing is never affected.
    A rejected registration (bad node id, version mismatch) is not retried
    until refresh() is called, which also signals a changed sensor list.
    """

    def __init__(
        self,
        coordinator: str,
        node_id: str,
        address: Callable[[], str],
        sensors: Callable[[], list[SensorAnnouncement]],
        client_factory: ClientFactory = AsyncPeerClient,
        backoff: ExponentialBackoff | None = None,
    ):
        self.coordinator = coordinator
        self.node_id = node_id
        self._address = address
        self._sensors = sensors
        self._client_factory = client_factory
        self._backoff = backoff or ExponentialBackoff()
        self._wakeup: asyncio.Event | None = None
        self.pending = True
        self._generation = 0
        self.attempts = 0
        self.acknowledged: PeerRegistration | None = None
        self.rejected: OpsenseError | None = None

    async def register_once(self) -> PeerRegistration:
        self.attempts += 1
        generation = self._generation
        async with self._client_factory(self.coordinator) as client:
            ack = await client.register(self.node_id, self._address(), self._sensors())
        self.acknowledged = ack
        # a refresh() during the request keeps the registration pending
        self.pending = generation != self._generation
        return ack

    def refresh(self) -> None:
        self._generation += 1
        self.pending = True
        self.rejected = None
        if self._wakeup is not None:
            self._wakeup.set()

    async def run(self) -> None:
        self._wakeup = asyncio.Event()
        while True:
            if not self.pending:
                await self._wakeup.wait()
                self._wakeup.clear()
                continue
            if not self._sensors():
                # nothing to announce; wait for a sensor to be added
                self.pending = False
                continue
            try:
                ack = await self.register_once()
            except OpsenseError as exc:
                if not isinstance(exc, RETRYABLE) and exc.code != "INTERNAL":
                    logger.error("Coordinator %s rejected registration: [%s] %s", self.coordinator, exc.code, exc)
                    self.rejected = exc
                    self.pending = False
                    continue
                delay = self._backoff.next_delay()
                logger.warning("Registration with %s failed (%s), retry in %.2fs", self.coordinator, exc, delay)
                try:
                    await asyncio.wait_for(self._wakeup.wait(), timeout=delay)
                    self._wakeup.clear()
                except asyncio.TimeoutError:
                    pass
                continue
            self._backoff.reset()
            logger.info("Registered with %s as %s (%d sensors)", self.coordinator, ack.node_id, len(ack.sensors))
