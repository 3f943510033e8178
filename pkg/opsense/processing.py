"""
Opsense — Processors
Ordered per-sensor processor chains: application-specific analytics that run
between acquisition and storage.

Built-in processors: passthrough, moving_average, rms_db, filter_range,
fuse_mean. Other analytics (e.g. an FFT spectrum) plug in through
register_processor().
"""

from __future__ import annotations

import enum
import logging
from abc import ABC, abstractmethod
from collections import deque
from collections.abc import Mapping, Sequence
from typing import Any, ClassVar, Protocol

import numpy as np

from . import config
from .errors import ParamError, ProcessorError
from .models import ProcessorSpec, StreamElement, Value

logger = logging.getLogger("opsense.processing")


class _Filtered(enum.Enum):
    FILTERED_OUT = "filtered_out"

    def __repr__(self) -> str:
        return "FILTERED_OUT"


# Returned by a processor (and by apply_chain) to drop the element.
FILTERED_OUT = _Filtered.FILTERED_OUT

ChainOutput = list[Value] | _Filtered


class ProcessingContext(Protocol):
    """What a processor may see of the node: the latest element of any sensor."""

    def latest(self, sensor: str) -> StreamElement | None: ...


class _NoContext:
    def latest(self, sensor: str) -> StreamElement | None:
        return None


# ── Pure functions ───────────────────────────────────────────────────────────


def rms_db(frame: Sequence[float], floor_db: float = config.DB_FLOOR, ref: float = 1.0) -> list[float]:
    """
    Level of an audio frame in decibels: 20·log10(rms(frame) / ref),
    clamped to >= floor_db. rms = sqrt(mean of squares).
    """
    if ref <= 0:
        raise ProcessorError(f"rms_db: ref must be > 0, got {ref}", code="BAD_PARAM")
    samples = np.asarray(frame, dtype=np.float64)
    if samples.size == 0:
        raise ProcessorError("rms_db: empty frame", code="EMPTY_FRAME")
    rms = float(np.sqrt(np.mean(samples * samples)))
    if rms == 0.0:
        return [float(floor_db)]
    return [max(float(floor_db), 20.0 * float(np.log10(rms / ref)))]


def filter_range(values: Sequence[Value], min: float, max: float) -> ChainOutput:
    """Pass `values` unchanged iff every numeric value lies in [min, max] (closed)."""
    if min > max:
        raise ProcessorError(f"filter_range: min {min} > max {max}", code="BAD_PARAM")
    for v in values:
        if isinstance(v, str):
            continue
        if not (min <= v <= max):
            return FILTERED_OUT
    return list(values)


# ── Processor classes ────────────────────────────────────────────────────────


class Processor(ABC):
    """One step of a chain. Instances hold the per-sensor state of that step."""

    name: ClassVar[str]
    defaults: ClassVar[dict[str, Any]] = {}

    def __init__(self, params: Mapping[str, Any], context: ProcessingContext):
        unknown = sorted(set(params) - set(self.defaults))
        if unknown:
            raise ParamError(f"{self.name}: unknown parameters {unknown}", code="PARAM_UNKNOWN")
        self.params = {**self.defaults, **params}
        self.context = context

    @abstractmethod
    def process(self, values: list[Value]) -> ChainOutput: ...


class Passthrough(Processor):
    name = "passthrough"

    def process(self, values: list[Value]) -> ChainOutput:
        return values


class MovingAverage(Processor):
    """Element-wise mean of the last n input vectors."""

    name = "moving_average"
    defaults = {"n": 5}

    def __init__(self, params: Mapping[str, Any], context: ProcessingContext):
        super().__init__(params, context)
        n = self.params["n"]
        if not isinstance(n, int) or isinstance(n, bool) or n < 1:
            raise ParamError(f"moving_average: n must be a positive integer, got {n!r}", code="PARAM_TYPE_MISMATCH")
        self._window: deque[np.ndarray] = deque(maxlen=n)

    def process(self, values: list[Value]) -> ChainOutput:
        vector = _numeric(self.name, values)
        if self._window and self._window[0].shape != vector.shape:
            raise ProcessorError(
                f"moving_average: arity changed from {self._window[0].size} to {vector.size}", code="PROCESSOR_ARITY"
            )
        self._window.append(vector)
        return np.mean(np.stack(self._window), axis=0).tolist()


class RmsDb(Processor):
    name = "rms_db"
    defaults = {"floor_db": config.DB_FLOOR, "ref": 1.0}

    def process(self, values: list[Value]) -> ChainOutput:
        return rms_db(_numeric(self.name, values).tolist(), self.params["floor_db"], self.params["ref"])


class FilterRange(Processor):
    name = "filter_range"
    defaults = {"min": float("-inf"), "max": float("inf")}

    def process(self, values: list[Value]) -> ChainOutput:
        return filter_range(values, self.params["min"], self.params["max"])


class FuseMean(Processor):
    """
    Element-wise mean of this sensor's vector and the latest vector of every
    named sensor. Sensors without data yet are left out.
    """

    name = "fuse_mean"
    defaults = {"sensors": []}

    def process(self, values: list[Value]) -> ChainOutput:
        own = _numeric(self.name, values)
        vectors = [own]
        for sensor in self.params["sensors"]:
            latest = self.context.latest(sensor)
            if latest is None:
                continue
            other = _numeric(self.name, list(latest.values))
            if other.shape != own.shape:
                raise ProcessorError(
                    f"fuse_mean: {sensor} has {other.size} values, expected {own.size}", code="PROCESSOR_ARITY"
                )
            vectors.append(other)
        return np.mean(np.stack(vectors), axis=0).tolist()


def _numeric(name: str, values: Sequence[Value]) -> np.ndarray:
    if not values or any(isinstance(v, str) for v in values):
        raise ProcessorError(f"{name}: needs a non-empty numeric vector", code="PROCESSOR_ARITY")
    return np.asarray(values, dtype=np.float64)


# ── Registry ─────────────────────────────────────────────────────────────────

_PROCESSORS: dict[str, type[Processor]] = {
    cls.name: cls for cls in (Passthrough, MovingAverage, RmsDb, FilterRange, FuseMean)
}


def register_processor(cls: type[Processor]) -> None:
    """Register a processor class under cls.name. Replaces an existing one."""
    _PROCESSORS[cls.name] = cls
    logger.info("Processor registered: %s", cls.name)


def unregister_processor(name: str) -> bool:
    return _PROCESSORS.pop(name, None) is not None


def processor_names() -> frozenset[str]:
    return frozenset(_PROCESSORS)


class ChainState:
    """Per-sensor state of a chain: one Processor instance per spec, built on first use."""

    def __init__(self, context: ProcessingContext | None = None):
        self.context: ProcessingContext = context or _NoContext()
        self.specs: tuple[ProcessorSpec, ...] | None = None
        self.processors: list[Processor] = []
        self.filtered = 0

    def build(self, chain: Sequence[ProcessorSpec]) -> None:
        processors = []
        for spec in chain:
            cls = _PROCESSORS.get(spec.name)
            if cls is None:
                raise ProcessorError(f"unknown processor {spec.name!r}", code="PROCESSOR_UNKNOWN")
            processors.append(cls(spec.params, self.context))
        self.processors = processors
        self.specs = tuple(chain)


def apply_chain(chain: Sequence[ProcessorSpec], values: Sequence[Value], state: ChainState) -> ChainOutput:
    """
    Run the processors in declared order, each consuming the previous output.
    FILTERED_OUT short-circuits the rest of the chain.
    """
    if state.specs != tuple(chain):
        state.build(chain)
    out: ChainOutput = list(values)
    for processor in state.processors:
        out = processor.process(out)
        if out is FILTERED_OUT:
            state.filtered += 1
            return FILTERED_OUT
    return out
