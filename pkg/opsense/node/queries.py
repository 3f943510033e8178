"""
Opsense — Query Manager
Bounded FIFO queue of query jobs. Jobs are answered strictly in enqueue
order by a single drain task; overflow rejects the newest job.
"""

from __future__ import annotations

import asyncio
import logging
import threading
import time
from collections import deque
from collections.abc import Callable
from concurrent.futures import Future

from ..errors import OpsenseError, QueueFull
from ..events import QUERY_ANSWERED, QUERY_REJECTED, EventBus
from ..models import QueryJob, QueryResult
from ..wire import element_size

logger = logging.getLogger("opsense.node.queries")

Executor = Callable[[QueryJob], QueryResult]


class Throttle:
    """Caps operations per second (constrained-server profile). None = unthrottled."""

    def __init__(self, ops_per_s: float | None):
        self.interval = 1.0 / ops_per_s if ops_per_s else 0.0
        self._next = 0.0

    async def wait(self) -> None:
        if not self.interval:
            return
        now = time.monotonic()
        if self._next > now:
            await asyncio.sleep(self._next - now)
            now = self._next
        self._next = now + self.interval


class QueryQueue:
    """
    Jobs may be enqueued from any thread; the returned concurrent Future
    resolves with a QueryResult or an OpsenseError (never a silent drop).
    """

    def __init__(
        self,
        executor: Executor,
        maxsize: int,
        bus: EventBus | None = None,
        throttle: Throttle | None = None,
    ):
        self._executor = executor
        self.maxsize = maxsize
        self._bus = bus or EventBus()
        self._throttle = throttle or Throttle(None)
        self._jobs: deque[tuple[QueryJob, Future[QueryResult]]] = deque()
        self._lock = threading.Lock()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._wakeup: asyncio.Event | None = None
        self.answered = 0
        self.rejected = 0

    @property
    def depth(self) -> int:
        return len(self._jobs)

    def enqueue(self, job: QueryJob) -> Future[QueryResult]:
        """Append a job. Raises QueueFull when the queue holds `maxsize` jobs."""
        future: Future[QueryResult] = Future()
        with self._lock:
            if len(self._jobs) >= self.maxsize:
                self.rejected += 1
                self._bus.emit(QUERY_REJECTED, {"job": job.id, "sensor": job.sensor})
                raise QueueFull(f"query queue full ({self.maxsize} jobs)")
            self._jobs.append((job, future))
        self._notify()
        return future

    def _notify(self) -> None:
        if self._loop is None or self._wakeup is None:
            return
        try:
            self._loop.call_soon_threadsafe(self._wakeup.set)
        except RuntimeError:
            pass  # loop closed during shutdown

    def _pop(self) -> tuple[QueryJob, Future[QueryResult]] | None:
        with self._lock:
            return self._jobs.popleft() if self._jobs else None

    def _answer(self, job: QueryJob, future: Future[QueryResult]) -> None:
        try:
            result = self._executor(job)
        except OpsenseError as exc:
            future.set_exception(exc)
            return
        except Exception as exc:
            logger.exception("Query %s failed", job.id)
            future.set_exception(exc)
            return
        self.answered += 1
        self._bus.emit(
            QUERY_ANSWERED,
            {
                "job": job.id,
                "sensor": job.sensor,
                "requester": job.requester,
                "elements": len(result.elements),
                "bytes": sum(element_size(e) for e in result.elements),
            },
        )
        future.set_result(result)

    def process_queries(self, limit: int | None = None) -> int:
        """Drain queued jobs in FIFO order (all of them, or `limit`). Returns how many were answered."""
        done = 0
        while limit is None or done < limit:
            item = self._pop()
            if item is None:
                break
            self._answer(*item)
            done += 1
        return done

    async def run(self) -> None:
        """Drain loop: one job at a time, paced by the throttle."""
        self._loop = asyncio.get_running_loop()
        self._wakeup = asyncio.Event()
        try:
            while True:
                item = self._pop()
                if item is None:
                    self._wakeup.clear()
                    if self._jobs:
                        continue
                    await self._wakeup.wait()
                    continue
                await self._throttle.wait()
                self._answer(*item)
        finally:
            self._loop = None
            self._wakeup = None
            self._fail_pending()

    def _fail_pending(self) -> None:
        while (item := self._pop()) is not None:
            job, future = item
            future.set_exception(OpsenseError(f"node stopped before answering {job.id}"))
