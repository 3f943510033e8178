"""
Opsense — Wire formats
Frame codec for the API manager and the structured-text format used by
config files, plugin descriptors and harness spec files.

Frame encoding (protocol version "1"):
  - UTF-8 text, one frame per line, terminated by "\\n".
  - Each frame is a JSON object with a fixed key order:
        type, id, gap (only when elements were dropped), body
  - Compact separators, no NaN/Infinity, integers for epoch-millisecond
    timestamps, floats in shortest round-trip decimal form.
  - Element bodies use the fixed key order: sensor, seq, timestamp, values.

Structured text (configs, descriptors, specs): indented JSON using the
field names of the pydantic models, one document per file.
"""

from __future__ import annotations

import json
import uuid
from enum import Enum
from pathlib import Path
from typing import Any, TypeVar

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11

    class StrEnum(str, Enum):
        def __str__(self) -> str:
            return str(self.value)

        def __format__(self, format_spec: str) -> str:
            return str(self.value).__format__(format_spec)

from pydantic import BaseModel, Field, ValidationError

from . import config
from .errors import BadRequest, OpsenseError
from .models import StreamElement


class FrameType(StrEnum):
    HELLO = "hello"
    REGISTER = "register"
    REGISTER_ACK = "register_ack"
    LIST_SENSORS = "list_sensors"
    SENSOR_LIST = "sensor_list"
    QUERY = "query"
    QUERY_RESULT = "query_result"
    SUBSCRIBE = "subscribe"
    SUBSCRIBE_ACK = "subscribe_ack"
    DELIVER = "deliver"
    DELIVER_ACK = "deliver_ack"
    ERROR = "error"
    STATUS = "status"


# Request type -> its single response type. hello and status answer in kind.
RESPONSE_TYPE: dict[FrameType, FrameType] = {
    FrameType.HELLO: FrameType.HELLO,
    FrameType.REGISTER: FrameType.REGISTER_ACK,
    FrameType.LIST_SENSORS: FrameType.SENSOR_LIST,
    FrameType.QUERY: FrameType.QUERY_RESULT,
    FrameType.SUBSCRIBE: FrameType.SUBSCRIBE_ACK,
    FrameType.DELIVER: FrameType.DELIVER_ACK,
    FrameType.STATUS: FrameType.STATUS,
}

_FRAME_TYPES = frozenset(t.value for t in FrameType)

MEDIA_TYPE = "application/x-ndjson"

# ── Endpoint paths ───────────────────────────────────────────────────────────

PATH_FRAME = "/frame"
PATH_REGISTER = "/register"
PATH_SENSORS = "/sensors"
PATH_LATEST = "/sensor/{name}/latest"
PATH_RANGE = "/sensor/{name}/range"
PATH_STREAM = "/sensor/{name}/stream"
PATH_SUBSCRIBE = "/subscribe"
PATH_DELIVER = "/deliver"
PATH_STATUS = "/status"

# Error code -> HTTP status
HTTP_STATUS: dict[str, int] = {
    "BAD_REQUEST": 400,
    "UNKNOWN_TYPE": 400,
    "VERSION_MISMATCH": 400,
    "RANGE_INVERTED": 400,
    "SENSOR_UNKNOWN": 404,
    "PLUGIN_UNKNOWN": 404,
    "SUBSCRIPTION_UNKNOWN": 404,
    "SEQ_GAP": 409,
    "CONFIG_INVALID": 422,
    "PARAM_MISSING": 422,
    "PARAM_TYPE_MISMATCH": 422,
    "PARAM_UNKNOWN": 422,
    "SOURCE_ARITY": 500,
    "PROCESSOR_ARITY": 422,
    "EMPTY_FRAME": 422,
    "QUEUE_FULL": 503,
    "PEER_UNREACHABLE": 502,
    "COORDINATOR_UNREACHABLE": 502,
    "TIMEOUT": 504,
    "INTERNAL": 500,
}


class Frame(BaseModel):
    type: FrameType
    id: str = ""
    body: dict[str, Any] = Field(default_factory=dict)
    gap: int | None = Field(None, ge=1)


def new_id() -> str:
    return uuid.uuid4().hex[:16]


def make_frame(
    type: FrameType | str,
    body: dict[str, Any] | None = None,
    id: str | None = None,
    gap: int | None = None,
) -> Frame:
    return Frame(type=FrameType(type), id=id if id is not None else new_id(), body=body or {}, gap=gap or None)


def error_frame(err: OpsenseError, id: str = "") -> Frame:
    body: dict[str, Any] = {"code": err.code, "message": str(err)}
    if err.detail is not None:
        body["detail"] = err.detail
    return Frame(type=FrameType.ERROR, id=id, body=body)


def http_status(code: str) -> int:
    return HTTP_STATUS.get(code, 400)


# ── Frame codec ──────────────────────────────────────────────────────────────


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def encode_frame(frame: Frame) -> str:
    """Frame -> one line of text, newline included."""
    obj: dict[str, Any] = {"type": frame.type.value, "id": frame.id}
    if frame.gap is not None:
        obj["gap"] = frame.gap
    obj["body"] = frame.body
    try:
        return _dumps(obj) + "\n"
    except ValueError as exc:
        raise BadRequest(f"frame not encodable: {exc}") from exc


def decode_frame(line: str | bytes) -> Frame:
    """One line of text -> Frame. Raises BadRequest (code UNKNOWN_TYPE for unknown frame types)."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BadRequest("frame is not valid UTF-8") from exc
    line = line.strip()
    if not line:
        raise BadRequest("empty frame")
    try:
        obj = json.loads(line, parse_constant=_reject_constant)
    except ValueError as exc:
        raise BadRequest(f"malformed frame: {exc}") from exc
    if not isinstance(obj, dict) or "type" not in obj:
        raise BadRequest("frame must be an object with a 'type'")
    extra = set(obj) - {"type", "id", "gap", "body"}
    if extra:
        raise BadRequest(f"unexpected frame keys: {sorted(extra)}")
    if not isinstance(obj["type"], str) or obj["type"] not in _FRAME_TYPES:
        raise BadRequest(f"unknown frame type {obj['type']!r}", code="UNKNOWN_TYPE")
    try:
        return Frame.model_validate(obj)
    except ValidationError as exc:
        raise BadRequest("invalid frame", detail=exc.errors(include_url=False, include_context=False)) from exc


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-finite number {name}")


def decode_frames(text: str) -> list[Frame]:
    return [decode_frame(line) for line in text.splitlines() if line.strip()]


# ── Elements ─────────────────────────────────────────────────────────────────


def element_to_body(e: StreamElement) -> dict[str, Any]:
    return {"sensor": e.sensor, "seq": e.seq, "timestamp": e.timestamp, "values": list(e.values)}


def element_from_body(body: dict[str, Any]) -> StreamElement:
    try:
        return StreamElement.model_validate(body)
    except ValidationError as exc:
        raise BadRequest("invalid element", detail=exc.errors(include_url=False, include_context=False)) from exc


def encode_element(e: StreamElement) -> str:
    return _dumps(element_to_body(e))


def element_size(e: StreamElement) -> int:
    """Serialized wire size of one element payload, in bytes."""
    return len(encode_element(e).encode("utf-8"))


def deliver_frame(e: StreamElement, subscription_id: str = "", gap: int | None = None) -> Frame:
    return Frame(type=FrameType.DELIVER, id=subscription_id, body=element_to_body(e), gap=gap or None)


def hello_frame(node_id: str, version: str = config.PROTOCOL_VERSION) -> Frame:
    return make_frame(FrameType.HELLO, {"node_id": node_id, "version": version})


# ── Structured text ──────────────────────────────────────────────────────────

M = TypeVar("M", bound=BaseModel)


def dumps_text(model: BaseModel) -> str:
    return model.model_dump_json(indent=2) + "\n"


def loads_text(text: str, cls: type[M]) -> M:
    """Parse a structured-text document. Raises BadRequest with the pydantic errors as detail."""
    try:
        return cls.model_validate_json(text)
    except ValidationError as exc:
        raise BadRequest(
            f"invalid {cls.__name__} document",
            detail=exc.errors(include_url=False, include_context=False),
        ) from exc


def load_file(path: str | Path, cls: type[M]) -> M:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise BadRequest(f"cannot read {path}: {exc.strerror or exc}") from exc
    return loads_text(text, cls)


def save_file(path: str | Path, model: BaseModel) -> None:
    Path(path).write_text(dumps_text(model), encoding="utf-8")
