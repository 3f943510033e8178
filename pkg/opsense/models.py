"""
Opsense — Pydantic models
Domain types shared by every module. Core types are frozen: safe to share
across tasks and threads once built.

Config rules (history_size >= 1, names resolve, ...) are NOT enforced here:
a config that breaks them must still be loadable so that validation can
report every violation at once (see validation.py).
"""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field

from . import config

FieldKind = Literal["numeric", "text"]
ParamType = Literal["number", "integer", "string", "boolean", "list"]
DeliveryMode = Literal["persistent_stream", "push"]
QueryKind = Literal["latest_n", "range"]

Value = float | str


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# ── Core ─────────────────────────────────────────────────────────────────────


class FieldSchema(_Frozen):
    name: str
    kind: FieldKind = "numeric"
    unit: str = ""


class StreamElement(_Frozen):
    """One timestamped reading. `timestamp` is epoch milliseconds."""

    model_config = ConfigDict(
        frozen=True,
        extra="forbid",
        json_schema_extra={
            "examples": [{"sensor": "noise", "seq": 41, "timestamp": 1760000000000, "values": [-23.5]}]
        },
    )

    sensor: str
    seq: int = Field(..., ge=0)
    timestamp: int
    values: tuple[Value, ...]


class ProcessorSpec(_Frozen):
    name: str
    params: dict[str, Any] = Field(default_factory=dict)


class SourceSpec(_Frozen):
    plugin: str
    params: dict[str, Any] = Field(default_factory=dict)


class VirtualSensorConfig(_Frozen):
    model_config = ConfigDict(
        frozen=True,
        extra="forbid",
        json_schema_extra={
            "examples": [
                {
                    "name": "noise",
                    "source": {"plugin": "sine_audio", "params": {"amplitude": 0.5, "freq_hz": 440}},
                    "processors": [{"name": "rms_db", "params": {"floor_db": -120}}],
                    "output_schema": [{"name": "level", "kind": "numeric", "unit": "dB"}],
                    "history_size": 60,
                }
            ]
        },
    )

    name: str
    source: SourceSpec
    processors: tuple[ProcessorSpec, ...] = ()
    output_schema: tuple[FieldSchema, ...]
    history_size: int
    sampling_interval: int = config.DEFAULT_SAMPLING_INTERVAL_MS


class ParameterSpec(_Frozen):
    name: str
    type: ParamType = "number"
    default: Any = None
    required: bool = False


class PluginDescriptor(_Frozen):
    """
    Declarative description of a sensor source.

    `frame_param` names an integer parameter: when set, the single declared
    field repeats that many times per sample (audio frames).
    `driver` binds the descriptor to an implementation: a built-in driver name
    or a 'module:Class' path. Defaults to the plugin name.
    """

    plugin_name: str
    description: str = ""
    fields: tuple[FieldSchema, ...]
    parameters: tuple[ParameterSpec, ...] = ()
    frame_param: str | None = None
    driver: str | None = None


class Violation(_Frozen):
    code: str
    message: str
    path: str = ""


class ValidationResult(_Frozen):
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


# ── Node ─────────────────────────────────────────────────────────────────────


class NodeConfig(_Frozen):
    node_id: str
    listen: str = config.LISTEN
    coordinator: str | None = None
    plugin_dir: str | None = None
    sensors: tuple[VirtualSensorConfig, ...] = ()
    queue_max: int = Field(config.QUEUE_MAX, ge=1)
    spill_dir: str | None = None
    constrained_ops_per_s: float | None = Field(None, gt=0)


class Subscription(BaseModel):
    """Mutable: `cursor` advances on acknowledged delivery, never backwards."""

    id: str
    sensor: str
    subscriber: str
    mode: DeliveryMode
    persistent_delivery: bool = True
    created_at: int
    cursor: int = -1


class SensorAnnouncement(_Frozen):
    name: str
    output_schema: tuple[FieldSchema, ...]


class PeerRegistration(_Frozen):
    node_id: str
    address: str
    sensors: tuple[SensorAnnouncement, ...]
    registered_at: int


class QueryJob(_Frozen):
    id: str
    sensor: str
    kind: QueryKind
    params: dict[str, Any] = Field(default_factory=dict)
    enqueued_at: int
    requester: str = ""


class QueryResult(_Frozen):
    job_id: str
    sensor: str
    elements: tuple[StreamElement, ...]
    server_ms: float


class SensorStatus(_Frozen):
    name: str
    plugin: str
    history_size: int
    count: int
    total_inserted: int
    bytes_estimate: int
    latest_seq: int
    dropped: int
    unavailable: int
    invalid: int
    failed: bool


class NodeStatus(_Frozen):
    node_id: str
    address: str
    version: str = config.VERSION
    active_sensors: int
    sensors: tuple[SensorStatus, ...]
    queue_depth: int
    queries_answered: int
    subscriptions: int
    gaps_reported: int
    storage_bytes: int
    pending_registrations: int
    registered_peers: int
    work: dict[str, dict[str, int]]


class RoundTripSample(_Frozen):
    """
    Requester-clock round trip. t_sent and t_received are epoch milliseconds
    (fractional) read from one monotonic-anchored clock on the requester, and
    duration_ms is exactly their difference.
    """

    request_id: str
    stream: str = ""
    sensor: str
    peer: str = ""
    t_sent: float
    t_received: float
    duration_ms: float = Field(..., ge=0)


class InboxStats(_Frozen):
    subscription: str
    sensor: str
    peer: str
    mode: DeliveryMode
    received: int
    duplicates: int
    last_seq: int
    gaps: int
    gap_elements: int
    connections: int
