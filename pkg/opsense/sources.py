"""
Opsense — Sensor sources
Plugin discovery, descriptor-driven instantiation and the built-in simulated
sources that stand in for on-board and external hardware sensors.

Random sources draw from numpy's PCG64 bit generator seeded with the `seed`
parameter. PCG64 and Generator.uniform/normal are specified independently of
platform, so identical (descriptor, params, seed) give bit-identical streams
on every machine.
"""

from __future__ import annotations

import importlib
import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .errors import (
    BadRequest,
    DirectoryUnreadable,
    OpsenseError,
    ParamError,
    PluginUnknown,
    SourceExhausted,
)
from .models import ParameterSpec, PluginDescriptor
from .validation import validate_descriptor
from .wire import loads_text

logger = logging.getLogger("opsense.sources")

DESCRIPTOR_SUFFIX = ".plugin"


# ── Source instances ─────────────────────────────────────────────────────────


class SourceInstance(ABC):
    """
    A ready-to-sample source. Owned by exactly one sampling task: no locking.
    Subclasses implement read(); sample() wraps it with the arity contract.
    """

    def __init__(self, descriptor: PluginDescriptor, params: dict[str, Any], base_dir: Path | None = None):
        self.plugin_name = descriptor.plugin_name
        self.descriptor = descriptor
        self.params = params
        self.base_dir = base_dir
        if descriptor.frame_param:
            self.arity = int(params[descriptor.frame_param]) * len(descriptor.fields)
        else:
            self.arity = len(descriptor.fields)
        self.t0: int | None = None
        self.reads = 0

    def elapsed_s(self, now: int) -> float:
        """Seconds since the first sample (t0)."""
        if self.t0 is None:
            self.t0 = now
        return (now - self.t0) / 1000.0

    @abstractmethod
    def read(self, now: int) -> list[float]:
        """One value vector at `now` (epoch ms). Raise SourceUnavailable when there is nothing."""


class ConstantSource(SourceInstance):
    def read(self, now: int) -> list[float]:
        return [float(self.params["value"])]


class SineSource(SourceInstance):
    def read(self, now: int) -> list[float]:
        t = self.elapsed_s(now)
        return [float(self.params["amplitude"]) * math.sin(2 * math.pi * float(self.params["freq_hz"]) * t)]


class RandomWalkSource(SourceInstance):
    def __init__(self, descriptor: PluginDescriptor, params: dict[str, Any], base_dir: Path | None = None):
        super().__init__(descriptor, params, base_dir)
        self._rng = np.random.Generator(np.random.PCG64(int(params["seed"])))
        self._value = float(params["start"])

    def read(self, now: int) -> list[float]:
        step = float(self.params["step"])
        self._value += float(self._rng.uniform(-step, step))
        return [self._value]


class SineAudioSource(SourceInstance):
    """Frames of A·sin(2π·f·k/rate); k counts samples across frames so the phase is continuous."""

    def __init__(self, descriptor: PluginDescriptor, params: dict[str, Any], base_dir: Path | None = None):
        super().__init__(descriptor, params, base_dir)
        self._k = 0

    def read(self, now: int) -> list[float]:
        frame = int(self.params["frame"])
        rate = float(self.params["rate"])
        k = np.arange(self._k, self._k + frame, dtype=np.float64)
        self._k += frame
        samples = float(self.params["amplitude"]) * np.sin(2 * np.pi * float(self.params["freq_hz"]) * k / rate)
        return samples.tolist()


class ReplaySource(SourceInstance):
    """
    Replays a recorded trace. CSV: header row of field names, then
    comma-separated numeric rows. NDJSON (.ndjson / .jsonl): one object per
    line, keys of the first object are the columns. Arity follows the columns.
    """

    def __init__(self, descriptor: PluginDescriptor, params: dict[str, Any], base_dir: Path | None = None):
        super().__init__(descriptor, params, base_dir)
        path = Path(params["file"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        try:
            if path.suffix.lower() in NDJSON_SUFFIXES:
                self.columns, rows = _read_ndjson(path)
            else:
                self.columns, rows = _read_csv(path)
        except (OSError, ValueError) as exc:
            raise ParamError(f"replay file {str(path)!r} unreadable: {exc}", code="PARAM_TYPE_MISMATCH") from exc
        if rows.size and (rows.shape[1] != len(self.columns) or np.isnan(rows).any()):
            raise ParamError(f"replay file {str(path)!r}: rows do not match header", code="PARAM_TYPE_MISMATCH")
        self.rows = rows
        self.cursor = 0
        self.arity = len(self.columns)

    def read(self, now: int) -> list[float]:
        if self.cursor >= len(self.rows):
            if not self.params["loop"] or not len(self.rows):
                raise SourceExhausted(f"replay of {self.params['file']!r} reached end of file")
            self.cursor = 0
        row = self.rows[self.cursor]
        self.cursor += 1
        return row.tolist()


NDJSON_SUFFIXES = frozenset({".ndjson", ".jsonl"})


def _read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip()
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    return [c.strip() for c in header.split(",") if c.strip()], rows


def _read_ndjson(path: Path) -> tuple[list[str], np.ndarray]:
    if not path.read_text(encoding="utf-8").strip():
        return [], np.empty((0, 0))
    # field names like "timestamp" must stay numbers
    frame = pd.read_json(path, lines=True, orient="records", convert_dates=False, keep_default_dates=False)
    return [str(c) for c in frame.columns], frame.to_numpy(dtype=np.float64, na_value=np.nan)


class MultiAxisSource(SourceInstance):
    """Accelerometer-like: x, y, z with gaussian noise, gravity on z."""

    def __init__(self, descriptor: PluginDescriptor, params: dict[str, Any], base_dir: Path | None = None):
        super().__init__(descriptor, params, base_dir)
        self._rng = np.random.Generator(np.random.PCG64(int(params["seed"])))

    def read(self, now: int) -> list[float]:
        x, y, z = self._rng.normal(0.0, float(self.params["scale"]), 3).tolist()
        return [x, y, z + float(self.params["gravity"])]


# Built-in drivers, keyed by driver name
_DRIVERS: dict[str, type[SourceInstance]] = {
    "constant": ConstantSource,
    "sine": SineSource,
    "random_walk": RandomWalkSource,
    "sine_audio": SineAudioSource,
    "replay": ReplaySource,
    "multi_axis": MultiAxisSource,
}


def register_driver(name: str, cls: type[SourceInstance]) -> None:
    """Register a driver. Replaces an existing driver with the same name."""
    _DRIVERS[name] = cls
    logger.info("Source driver registered: %s", name)


def list_drivers() -> list[str]:
    return sorted(_DRIVERS)


def _resolve_driver(descriptor: PluginDescriptor) -> type[SourceInstance]:
    ref = descriptor.driver or descriptor.plugin_name
    if ":" in ref:
        module_name, _, attr = ref.partition(":")
        try:
            cls = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as exc:
            raise PluginUnknown(f"driver {ref!r} for {descriptor.plugin_name!r} not importable: {exc}") from exc
        if not (isinstance(cls, type) and issubclass(cls, SourceInstance)):
            raise PluginUnknown(f"driver {ref!r} is not a SourceInstance")
        return cls
    if ref not in _DRIVERS:
        raise PluginUnknown(f"no driver {ref!r} for plugin {descriptor.plugin_name!r}")
    return _DRIVERS[ref]


# ── Parameters ───────────────────────────────────────────────────────────────


def _type_ok(spec: ParameterSpec, value: Any) -> bool:
    if isinstance(value, bool):
        return spec.type == "boolean"
    match spec.type:
        case "number":
            return isinstance(value, int | float)
        case "integer":
            return isinstance(value, int)
        case "string":
            return isinstance(value, str)
        case "list":
            return isinstance(value, list | tuple)
    return False


def resolve_params(descriptor: PluginDescriptor, params: Mapping[str, Any]) -> dict[str, Any]:
    """Apply defaults and type-check. Raises ParamError (PARAM_MISSING / PARAM_TYPE_MISMATCH / PARAM_UNKNOWN)."""
    declared = {p.name: p for p in descriptor.parameters}
    unknown = sorted(set(params) - set(declared))
    if unknown:
        raise ParamError(f"{descriptor.plugin_name}: unknown parameters {unknown}", code="PARAM_UNKNOWN")
    resolved: dict[str, Any] = {}
    for spec in descriptor.parameters:
        if spec.name in params:
            value = params[spec.name]
            if not _type_ok(spec, value):
                raise ParamError(
                    f"{descriptor.plugin_name}: parameter {spec.name!r} expects {spec.type}, "
                    f"got {type(value).__name__}",
                    code="PARAM_TYPE_MISMATCH",
                )
            resolved[spec.name] = value
        elif spec.required:
            raise ParamError(
                f"{descriptor.plugin_name}: missing required parameter {spec.name!r}", code="PARAM_MISSING"
            )
        else:
            resolved[spec.name] = spec.default
    return resolved


def instantiate(
    descriptor: PluginDescriptor, params: Mapping[str, Any], base_dir: str | Path | None = None
) -> SourceInstance:
    """Build a ready-to-sample instance; missing optional params take descriptor defaults."""
    resolved = resolve_params(descriptor, params)
    cls = _resolve_driver(descriptor)
    return cls(descriptor, resolved, Path(base_dir) if base_dir is not None else None)


def sample(instance: SourceInstance, now: int) -> list[float]:
    """
    Acquire one value vector. Raises SourceUnavailable / SourceExhausted when the
    source has nothing; never returns a vector of the wrong arity.
    """
    values = instance.read(now)
    instance.reads += 1
    if len(values) != instance.arity:
        raise OpsenseError(
            f"{instance.plugin_name} produced {len(values)} values, expected {instance.arity}",
            code="SOURCE_ARITY",
        )
    return values


# ── Discovery ────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Diagnostic:
    file: str
    message: str


@dataclass
class DiscoveryResult:
    descriptors: list[PluginDescriptor] = field(default_factory=list)
    diagnostics: list[Diagnostic] = field(default_factory=list)


def _load_descriptor(path: Path) -> PluginDescriptor:
    descriptor = loads_text(path.read_text(encoding="utf-8"), PluginDescriptor)
    result = validate_descriptor(descriptor)
    if not result.ok:
        raise BadRequest("; ".join(f"{v.code}: {v.message}" for v in result.violations))
    if descriptor.plugin_name != path.stem:
        raise BadRequest(f"file name {path.name!r} does not match plugin_name {descriptor.plugin_name!r}")
    return descriptor


def discover_plugins(plugin_dir: str | Path) -> DiscoveryResult:
    """
    One descriptor per well-formed `<plugin_name>.plugin` file, sorted by
    plugin_name. Malformed files are skipped and reported, never fatal.
    """
    directory = Path(plugin_dir)
    try:
        entries = sorted(directory.iterdir())
    except OSError as exc:
        raise DirectoryUnreadable(f"cannot list plugin directory {str(directory)!r}: {exc}") from exc

    result = DiscoveryResult()
    for path in entries:
        if path.suffix != DESCRIPTOR_SUFFIX or not path.is_file():
            continue
        try:
            result.descriptors.append(_load_descriptor(path))
        except (OSError, UnicodeDecodeError, OpsenseError) as exc:
            logger.warning("Skipping malformed plugin descriptor %s: %s", path.name, exc)
            result.diagnostics.append(Diagnostic(file=path.name, message=str(exc)))
    result.descriptors.sort(key=lambda d: d.plugin_name)
    return result


class PluginRegistry:
    """
    Known plugin descriptors. Read-mostly: discovery swaps the whole table
    in one assignment, so concurrent lookups never see a partial state.
    """

    def __init__(self, plugin_dir: str | Path | None = None):
        self.plugin_dir = Path(plugin_dir) if plugin_dir is not None else None
        self._descriptors: dict[str, PluginDescriptor] = {}
        self.diagnostics: list[Diagnostic] = []

    def discover(self) -> DiscoveryResult:
        """(Re)load descriptors from plugin_dir. Only runs on explicit command."""
        if self.plugin_dir is None:
            return DiscoveryResult(descriptors=self.descriptors())
        result = discover_plugins(self.plugin_dir)
        self._descriptors = {d.plugin_name: d for d in result.descriptors}
        self.diagnostics = list(result.diagnostics)
        logger.info(
            "Discovered %d plugins in %s (%d skipped)",
            len(result.descriptors),
            self.plugin_dir,
            len(result.diagnostics),
        )
        return result

    def add(self, descriptor: PluginDescriptor) -> None:
        table = dict(self._descriptors)
        table[descriptor.plugin_name] = descriptor
        self._descriptors = table

    def get(self, name: str) -> PluginDescriptor:
        try:
            return self._descriptors[name]
        except KeyError:
            raise PluginUnknown(f"unknown plugin {name!r}") from None

    def names(self) -> frozenset[str]:
        return frozenset(self._descriptors)

    def descriptors(self) -> list[PluginDescriptor]:
        return [self._descriptors[n] for n in sorted(self._descriptors)]

    def instantiate(self, name: str, params: Mapping[str, Any]) -> SourceInstance:
        return instantiate(self.get(name), params, base_dir=self.plugin_dir)
