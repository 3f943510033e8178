"""
Opsense — Event System
In-process event dispatch for stream and delivery lifecycle events.
Each node owns its own bus so several nodes can share one process.
"""

from __future__ import annotations

import logging
import threading
from collections import defaultdict
from collections.abc import Callable
from typing import Any

logger = logging.getLogger("opsense.events")

EventHandler = Callable[[str, dict[str, Any]], None]

# Event types
ELEMENT_STORED = "element.stored"
ELEMENT_EVICTED = "element.evicted"
ELEMENT_FILTERED = "element.filtered"
ELEMENT_INVALID = "element.invalid"
SOURCE_UNAVAILABLE = "source.unavailable"
SENSOR_FAILED = "sensor.failed"
QUERY_ANSWERED = "query.answered"
QUERY_REJECTED = "query.rejected"
DELIVERY_ACKED = "delivery.acked"
DELIVERY_GAP = "delivery.gap"
CONNECTION_OPENED = "connection.opened"
PEER_REGISTERED = "peer.registered"

ALL_EVENTS = (
    ELEMENT_STORED,
    ELEMENT_EVICTED,
    ELEMENT_FILTERED,
    ELEMENT_INVALID,
    SOURCE_UNAVAILABLE,
    SENSOR_FAILED,
    QUERY_ANSWERED,
    QUERY_REJECTED,
    DELIVERY_ACKED,
    DELIVERY_GAP,
    CONNECTION_OPENED,
    PEER_REGISTERED,
)


class EventBus:
    def __init__(self) -> None:
        self._handlers: dict[str, list[EventHandler]] = defaultdict(list)

    def on(self, event: str, handler: EventHandler) -> None:
        """Register a handler for an event type. Duplicates are ignored."""
        if handler not in self._handlers[event]:
            self._handlers[event].append(handler)

    def emit(self, event: str, data: dict[str, Any] | None = None) -> None:
        """Emit an event to all registered handlers."""
        payload = data or {}
        for handler in self._handlers.get(event, []):
            try:
                handler(event, payload)
            except Exception:
                logger.exception("Event handler error for %s", event)

    def clear(self) -> None:
        """Remove all handlers (for testing)."""
        self._handlers.clear()


class WorkCounter:
    """
    Work-count proxy for energy: what a node did, split into sensing work
    (acquisition, processing, storage) and sending work (serving peers).
    """

    def __init__(self, bus: EventBus | None = None) -> None:
        self._lock = threading.Lock()
        self.elements_processed = 0
        self.elements_filtered = 0
        self.queries_answered = 0
        self.queries_rejected = 0
        self.elements_sent = 0
        self.connections_opened = 0
        self.bytes_moved = 0
        self.gaps_reported = 0
        if bus is not None:
            self.attach(bus)

    def attach(self, bus: EventBus) -> None:
        for event in ALL_EVENTS:
            bus.on(event, self._handle)

    def _handle(self, event: str, data: dict[str, Any]) -> None:
        with self._lock:
            if event == ELEMENT_STORED:
                self.elements_processed += 1
            elif event == ELEMENT_FILTERED:
                self.elements_filtered += 1
            elif event == QUERY_ANSWERED:
                self.queries_answered += 1
                self.elements_sent += data.get("elements", 0)
                self.bytes_moved += data.get("bytes", 0)
            elif event == QUERY_REJECTED:
                self.queries_rejected += 1
            elif event == DELIVERY_ACKED:
                self.elements_sent += 1
                self.bytes_moved += data.get("bytes", 0)
            elif event == CONNECTION_OPENED:
                self.connections_opened += 1
            elif event == DELIVERY_GAP:
                self.gaps_reported += 1

    def snapshot(self) -> dict[str, dict[str, int]]:
        with self._lock:
            return {
                "sensing": {
                    "elements_processed": self.elements_processed,
                    "elements_filtered": self.elements_filtered,
                },
                "sending": {
                    "queries_answered": self.queries_answered,
                    "queries_rejected": self.queries_rejected,
                    "elements_sent": self.elements_sent,
                    "connections_opened": self.connections_opened,
                    "bytes_moved": self.bytes_moved,
                    "gaps_reported": self.gaps_reported,
                },
            }
