"""
Opsense — Validation
Rule checks for configs, descriptors and stream elements.
Violations are data: every check returns a ValidationResult, none raise.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from collections.abc import Collection, Iterable, Sequence
from dataclasses import dataclass, field

from . import config
from .models import (
    FieldSchema,
    NodeConfig,
    PluginDescriptor,
    StreamElement,
    ValidationResult,
    Violation,
    VirtualSensorConfig,
)

IDENTIFIER_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
# node ids may also carry dashes (host-style names like "edge-1")
NODE_ID_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_-]*$")

# Violation codes
NAME_INVALID = "NAME_INVALID"
FIELD_NAME_INVALID = "FIELD_NAME_INVALID"
FIELD_NAME_DUPLICATE = "FIELD_NAME_DUPLICATE"
SCHEMA_EMPTY = "SCHEMA_EMPTY"
HISTORY_SIZE_NONPOSITIVE = "HISTORY_SIZE_NONPOSITIVE"
SAMPLING_INTERVAL_TOO_SHORT = "SAMPLING_INTERVAL_TOO_SHORT"
PLUGIN_UNKNOWN = "PLUGIN_UNKNOWN"
PROCESSOR_UNKNOWN = "PROCESSOR_UNKNOWN"
FIELDS_EMPTY = "FIELDS_EMPTY"
PARAM_DUPLICATE = "PARAM_DUPLICATE"
REQUIRED_PARAM_HAS_DEFAULT = "REQUIRED_PARAM_HAS_DEFAULT"
ARITY_MISMATCH = "ARITY_MISMATCH"
NON_FINITE_VALUE = "NON_FINITE_VALUE"
KIND_MISMATCH = "KIND_MISMATCH"
SENSOR_NAME_DUPLICATE = "SENSOR_NAME_DUPLICATE"
NODE_ID_INVALID = "NODE_ID_INVALID"


@dataclass(frozen=True)
class RegistryView:
    """Names a config may refer to: known plugins and processors."""

    plugins: Collection[str] = field(default_factory=frozenset)
    processors: Collection[str] = field(default_factory=frozenset)


def _result(violations: Iterable[Violation]) -> ValidationResult:
    return ValidationResult(violations=tuple(violations))


def _check_schema(schema: Sequence[FieldSchema], path: str) -> list[Violation]:
    out: list[Violation] = []
    for i, f in enumerate(schema):
        if not IDENTIFIER_RE.match(f.name):
            message = f"invalid field name {f.name!r}"
            out.append(Violation(code=FIELD_NAME_INVALID, message=message, path=f"{path}[{i}]"))
    counts = Counter(f.name for f in schema)
    for name in sorted(n for n, c in counts.items() if c > 1):
        out.append(Violation(code=FIELD_NAME_DUPLICATE, message=f"field {name!r} declared twice", path=path))
    return out


def validate_config(cfg: VirtualSensorConfig, registry_view: RegistryView) -> ValidationResult:
    """Check every VirtualSensorConfig rule. Deterministic: rules run in a fixed order."""
    out: list[Violation] = []
    if not IDENTIFIER_RE.match(cfg.name):
        out.append(Violation(code=NAME_INVALID, message=f"invalid sensor name {cfg.name!r}", path="name"))
    if cfg.history_size < 1:
        out.append(
            Violation(
                code=HISTORY_SIZE_NONPOSITIVE,
                message=f"history_size must be >= 1, got {cfg.history_size}",
                path="history_size",
            )
        )
    if cfg.sampling_interval < config.MIN_SAMPLING_INTERVAL_MS:
        out.append(
            Violation(
                code=SAMPLING_INTERVAL_TOO_SHORT,
                message=f"sampling_interval must be >= {config.MIN_SAMPLING_INTERVAL_MS} ms",
                path="sampling_interval",
            )
        )
    if cfg.source.plugin not in registry_view.plugins:
        out.append(
            Violation(code=PLUGIN_UNKNOWN, message=f"unknown plugin {cfg.source.plugin!r}", path="source.plugin")
        )
    for i, proc in enumerate(cfg.processors):
        if proc.name not in registry_view.processors:
            out.append(
                Violation(
                    code=PROCESSOR_UNKNOWN,
                    message=f"unknown processor {proc.name!r}",
                    path=f"processors[{i}].name",
                )
            )
    if not cfg.output_schema:
        out.append(Violation(code=SCHEMA_EMPTY, message="output_schema is empty", path="output_schema"))
    out.extend(_check_schema(cfg.output_schema, "output_schema"))
    return _result(out)


def validate_descriptor(descriptor: PluginDescriptor) -> ValidationResult:
    out: list[Violation] = []
    if not IDENTIFIER_RE.match(descriptor.plugin_name):
        out.append(
            Violation(code=NAME_INVALID, message=f"invalid plugin name {descriptor.plugin_name!r}", path="plugin_name")
        )
    if not descriptor.fields:
        out.append(Violation(code=FIELDS_EMPTY, message="descriptor declares no fields", path="fields"))
    out.extend(_check_schema(descriptor.fields, "fields"))
    counts = Counter(p.name for p in descriptor.parameters)
    for name in sorted(n for n, c in counts.items() if c > 1):
        out.append(Violation(code=PARAM_DUPLICATE, message=f"parameter {name!r} declared twice", path="parameters"))
    for i, p in enumerate(descriptor.parameters):
        if p.required and p.default is not None:
            out.append(
                Violation(
                    code=REQUIRED_PARAM_HAS_DEFAULT,
                    message=f"required parameter {p.name!r} must not have a default",
                    path=f"parameters[{i}]",
                )
            )
    return _result(out)


def validate_element(e: StreamElement, schema: Sequence[FieldSchema]) -> ValidationResult:
    """ok iff arity matches the schema and every numeric value is finite."""
    if len(e.values) != len(schema):
        return _result(
            [
                Violation(
                    code=ARITY_MISMATCH,
                    message=f"expected {len(schema)} values, got {len(e.values)}",
                    path="values",
                )
            ]
        )
    out: list[Violation] = []
    for i, (value, f) in enumerate(zip(e.values, schema)):
        if f.kind == "numeric":
            if isinstance(value, str):
                out.append(Violation(code=KIND_MISMATCH, message=f"{f.name} expects a number", path=f"values[{i}]"))
            elif not math.isfinite(value):
                out.append(Violation(code=NON_FINITE_VALUE, message=f"{f.name} is {value}", path=f"values[{i}]"))
        elif not isinstance(value, str):
            out.append(Violation(code=KIND_MISMATCH, message=f"{f.name} expects text", path=f"values[{i}]"))
    return _result(out)


def valid_node_id(node_id: str) -> bool:
    """The one node_id rule, shared by config validation and the coordinator."""
    return bool(NODE_ID_RE.match(node_id))


def validate_node_config(cfg: NodeConfig, registry_view: RegistryView) -> ValidationResult:
    """Per-sensor checks plus cross-sensor rules (unique names)."""
    out: list[Violation] = []
    if not valid_node_id(cfg.node_id):
        out.append(Violation(code=NODE_ID_INVALID, message=f"invalid node_id {cfg.node_id!r}", path="node_id"))
    counts = Counter(s.name for s in cfg.sensors)
    for name in sorted(n for n, c in counts.items() if c > 1):
        message = f"sensor {name!r} defined {counts[name]} times"
        out.append(Violation(code=SENSOR_NAME_DUPLICATE, message=message, path="sensors"))
    for i, sensor in enumerate(cfg.sensors):
        for v in validate_config(sensor, registry_view).violations:
            out.append(Violation(code=v.code, message=v.message, path=f"sensors[{i}].{v.path}"))
    return _result(out)
