"""
Opsense — Storage Manager
Per-sensor bounded sliding windows: the only persistence of stream data.

Single writer (the sensor's sampling task), many readers. Every read takes a
snapshot under the store lock, so readers never see a torn window.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import threading
import time
from collections import deque
from collections.abc import Callable, Iterable
from pathlib import Path
from typing import IO, NamedTuple

from .errors import BadRequest, RangeInverted, SeqGap, StorageError
from .models import StreamElement
from .wire import deliver_frame, element_size, encode_frame

logger = logging.getLogger("opsense.storage")


class SpillLog:
    """Append-only log of every inserted element, one deliver frame per line."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh: IO[str] | None = self.path.open("a", encoding="utf-8")

    def append(self, e: StreamElement) -> None:
        if self._fh is None:
            return
        self._fh.write(encode_frame(deliver_frame(e)))
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class WindowStore:
    """
    Ring of the `capacity` most recent elements of one sensor, oldest first.
    bytes_estimate is the summed wire size of the retained elements.
    """

    def __init__(self, sensor: str, capacity: int, spill: SpillLog | None = None):
        if capacity < 1:
            raise BadRequest(f"window capacity must be >= 1, got {capacity}")
        self.sensor = sensor
        self.capacity = capacity
        self.spill = spill
        self.total_inserted = 0
        self.bytes_estimate = 0
        self.failed = False
        self._elements: deque[StreamElement] = deque()
        self._sizes: deque[int] = deque()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._elements)

    @property
    def latest_seq(self) -> int:
        """Seq of the newest element ever inserted, -1 before the first insert."""
        return self.total_inserted - 1

    def insert(self, e: StreamElement) -> StreamElement | None:
        """
        Append `e`; return the evicted oldest element when the window was full.
        A non-contiguous seq marks this store failed and raises SeqGap.
        """
        if e.sensor != self.sensor:
            raise StorageError(f"element for {e.sensor!r} inserted into window of {self.sensor!r}")
        if e.seq != self.total_inserted:
            self.failed = True
            raise SeqGap(f"{self.sensor}: expected seq {self.total_inserted}, got {e.seq}")
        size = element_size(e)
        evicted = None
        with self._lock:
            self._elements.append(e)
            self._sizes.append(size)
            self.bytes_estimate += size
            self.total_inserted += 1
            if len(self._elements) > self.capacity:
                evicted = self._elements.popleft()
                self.bytes_estimate -= self._sizes.popleft()
        if self.spill is not None:
            self.spill.append(e)
        return evicted

    def resize(self, capacity: int) -> list[StreamElement]:
        """Change the capacity at runtime. Shrinking evicts immediately, oldest first."""
        if capacity < 1:
            raise BadRequest(f"window capacity must be >= 1, got {capacity}")
        evicted: list[StreamElement] = []
        with self._lock:
            self.capacity = capacity
            while len(self._elements) > capacity:
                evicted.append(self._elements.popleft())
                self.bytes_estimate -= self._sizes.popleft()
        if evicted:
            logger.info("%s: window shrunk to %d, evicted %d", self.sensor, capacity, len(evicted))
        return evicted

    def query_latest(self, n: int) -> list[StreamElement]:
        """min(n, count) newest elements, newest first."""
        if n < 1:
            raise BadRequest(f"n must be >= 1, got {n}")
        with self._lock:
            return list(itertools.islice(reversed(self._elements), n))

    def query_range(self, from_ts: int, to_ts: int) -> list[StreamElement]:
        """Retained elements with from_ts <= timestamp <= to_ts, oldest first."""
        if from_ts > to_ts:
            raise RangeInverted(f"range [{from_ts}, {to_ts}] is inverted")
        with self._lock:
            return [e for e in self._elements if from_ts <= e.timestamp <= to_ts]

    def latest(self) -> StreamElement | None:
        with self._lock:
            return self._elements[-1] if self._elements else None

    def snapshot(self) -> list[StreamElement]:
        """The whole window, oldest first."""
        with self._lock:
            return list(self._elements)

    def elements_after(self, cursor: int, limit: int | None = None) -> tuple[int, list[StreamElement]]:
        """
        Elements with seq > cursor, oldest first, and the number of such
        elements already evicted (the gap a subscriber at `cursor` has suffered).
        """
        with self._lock:
            if not self._elements:
                return max(0, self.total_inserted - (cursor + 1)), []
            first = self._elements[0].seq
            gap = max(0, first - (cursor + 1))
            start = max(0, cursor + 1 - first)
            stop = len(self._elements) if limit is None else min(len(self._elements), start + limit)
            return gap, list(itertools.islice(self._elements, start, stop))


# ── Storage series ───────────────────────────────────────────────────────────


class StoragePoint(NamedTuple):
    t_ms: int
    bytes: int


def storage_total(stores: Iterable[WindowStore]) -> int:
    return sum(s.bytes_estimate for s in stores)


class StorageRecorder:
    """Periodic snapshots of the summed bytes_estimate across a set of stores."""

    def __init__(self, stores: Callable[[], Iterable[WindowStore]]):
        self._stores = stores
        self.series: list[StoragePoint] = []

    def snapshot(self, now_ms: int | None = None) -> StoragePoint:
        t = now_ms if now_ms is not None else time.time_ns() // 1_000_000
        point = StoragePoint(t, storage_total(self._stores()))
        self.series.append(point)
        return point

    async def run(self, sample_interval: float, stop: asyncio.Event) -> list[StoragePoint]:
        while not stop.is_set():
            self.snapshot()
            try:
                await asyncio.wait_for(stop.wait(), timeout=sample_interval)
            except asyncio.TimeoutError:
                pass
        return self.series


async def storage_series(
    stores: Callable[[], Iterable[WindowStore]], sample_interval: float, samples: int
) -> list[StoragePoint]:
    """`samples` snapshots of total bytes_estimate, `sample_interval` seconds apart."""
    recorder = StorageRecorder(stores)
    for i in range(samples):
        if i:
            await asyncio.sleep(sample_interval)
        recorder.snapshot()
    return recorder.series
