"""
Opsense — Virtual sensor
Binds one source instance, its processor chain and its window store.
acquire() is the whole acquisition -> processing -> storage step for one tick.
"""

from __future__ import annotations

import logging
import threading

from ..errors import OpsenseError, SeqGap, SourceExhausted, SourceUnavailable
from ..events import (
    ELEMENT_EVICTED,
    ELEMENT_FILTERED,
    ELEMENT_INVALID,
    ELEMENT_STORED,
    SENSOR_FAILED,
    SOURCE_UNAVAILABLE,
    EventBus,
)
from ..models import SensorStatus, StreamElement, VirtualSensorConfig
from ..processing import FILTERED_OUT, ChainState, ProcessingContext, apply_chain
from ..sources import SourceInstance, sample
from ..storage import WindowStore
from ..validation import validate_element
from ..wire import element_size

logger = logging.getLogger("opsense.node.sensor")


class VirtualSensor:
    """Owned by one sampling task. acquire() also serves manual tick() calls from other threads."""

    def __init__(
        self,
        cfg: VirtualSensorConfig,
        source: SourceInstance,
        store: WindowStore,
        bus: EventBus,
        context: ProcessingContext | None = None,
    ):
        self.config = cfg
        self.source = source
        self.store = store
        self.bus = bus
        self.chain_state = ChainState(context)
        self.last_timestamp: int | None = None
        self.dropped = 0
        self.unavailable = 0
        self.invalid = 0
        self.exhausted = False
        self._lock = threading.Lock()

    @property
    def name(self) -> str:
        return self.config.name

    @property
    def failed(self) -> bool:
        return self.store.failed

    @property
    def active(self) -> bool:
        return not (self.failed or self.exhausted)

    def acquire(self, now: int) -> StreamElement | None:
        """
        Sample, process, validate, store. Returns the stored element, or None
        when the tick produced nothing (unavailable, filtered out, invalid).
        The timestamp is assigned here, never by the source.
        """
        with self._lock:
            return self._acquire(now)

    def _acquire(self, now: int) -> StreamElement | None:
        if not self.active:
            return None
        try:
            values = sample(self.source, now)
        except SourceExhausted as exc:
            self.exhausted = True
            logger.info("%s: source exhausted, sampling stops (%s)", self.name, exc)
            self.bus.emit(SOURCE_UNAVAILABLE, {"sensor": self.name, "exhausted": True})
            return None
        except SourceUnavailable:
            self.unavailable += 1
            self.bus.emit(SOURCE_UNAVAILABLE, {"sensor": self.name, "exhausted": False})
            return None

        try:
            out = apply_chain(self.config.processors, values, self.chain_state)
        except OpsenseError as exc:
            self.invalid += 1
            logger.warning("%s: processor chain failed: %s", self.name, exc)
            self.bus.emit(ELEMENT_INVALID, {"sensor": self.name, "code": exc.code})
            return None
        if out is FILTERED_OUT:
            self.dropped += 1
            self.bus.emit(ELEMENT_FILTERED, {"sensor": self.name})
            return None

        timestamp = now if self.last_timestamp is None else max(now, self.last_timestamp)
        element = StreamElement(sensor=self.name, seq=self.store.total_inserted, timestamp=timestamp, values=tuple(out))
        result = validate_element(element, self.config.output_schema)
        if not result.ok:
            self.invalid += 1
            logger.warning("%s: element rejected: %s", self.name, ", ".join(result.codes))
            self.bus.emit(ELEMENT_INVALID, {"sensor": self.name, "code": result.codes[0]})
            return None

        try:
            evicted = self.store.insert(element)
        except SeqGap:
            logger.exception("%s: sequence gap, sensor stopped", self.name)
            self.bus.emit(SENSOR_FAILED, {"sensor": self.name})
            return None
        self.last_timestamp = timestamp
        self.bus.emit(ELEMENT_STORED, {"sensor": self.name, "seq": element.seq, "bytes": element_size(element)})
        if evicted is not None:
            self.bus.emit(ELEMENT_EVICTED, {"sensor": self.name, "seq": evicted.seq})
        return element

    def status(self) -> SensorStatus:
        return SensorStatus(
            name=self.name,
            plugin=self.config.source.plugin,
            history_size=self.store.capacity,
            count=len(self.store),
            total_inserted=self.store.total_inserted,
            bytes_estimate=self.store.bytes_estimate,
            latest_seq=self.store.latest_seq,
            dropped=self.dropped,
            unavailable=self.unavailable,
            invalid=self.invalid,
            failed=self.failed,
        )
