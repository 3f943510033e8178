"""
Opsense — Error types
Every failure carries a machine-readable code; the wire layer maps codes to
HTTP status and back.
"""

from __future__ import annotations

from typing import Any


class OpsenseError(Exception):
    """Base error class for the engine."""

    code = "INTERNAL"

    def __init__(self, message: str, code: str | None = None, detail: Any = None):
        super().__init__(message)
        if code is not None:
            self.code = code
        self.detail = detail


class BadRequest(OpsenseError):
    code = "BAD_REQUEST"


class VersionMismatch(OpsenseError):
    code = "VERSION_MISMATCH"


class ConfigInvalid(OpsenseError):
    """Aggregated config violations. `detail` holds the violation list."""

    code = "CONFIG_INVALID"


class SensorUnknown(OpsenseError):
    code = "SENSOR_UNKNOWN"


class PluginUnknown(OpsenseError):
    code = "PLUGIN_UNKNOWN"


class ParamError(OpsenseError):
    """PARAM_MISSING or PARAM_TYPE_MISMATCH."""

    code = "PARAM_MISSING"


class DirectoryUnreadable(OpsenseError):
    code = "DIRECTORY_UNREADABLE"


class SourceUnavailable(OpsenseError):
    """Transient: the source has nothing this tick."""

    code = "SOURCE_UNAVAILABLE"


class SourceExhausted(SourceUnavailable):
    code = "SOURCE_EXHAUSTED"


class ProcessorError(OpsenseError):
    code = "PROCESSOR_ARITY"


class StorageError(OpsenseError):
    code = "STORAGE_ERROR"


class SeqGap(StorageError):
    code = "SEQ_GAP"


class RangeInverted(StorageError):
    code = "RANGE_INVERTED"


class QueueFull(OpsenseError):
    code = "QUEUE_FULL"


class PeerUnreachable(OpsenseError):
    code = "PEER_UNREACHABLE"


class CoordinatorUnreachable(PeerUnreachable):
    code = "COORDINATOR_UNREACHABLE"


class RequestTimeout(OpsenseError):
    code = "TIMEOUT"


class SubscriptionUnknown(OpsenseError):
    code = "SUBSCRIPTION_UNKNOWN"


class NoCompletions(OpsenseError):
    code = "NO_COMPLETIONS"


class SpawnFailed(OpsenseError):
    code = "SPAWN_FAILED"


class IOUnwritable(OpsenseError):
    code = "IO_UNWRITABLE"


class AddressInUse(OpsenseError):
    code = "ADDRESS_IN_USE"


_BY_CODE: dict[str, type[OpsenseError]] = {
    cls.code: cls
    for cls in (
        BadRequest,
        VersionMismatch,
        ConfigInvalid,
        SensorUnknown,
        PluginUnknown,
        ParamError,
        DirectoryUnreadable,
        SourceUnavailable,
        SourceExhausted,
        ProcessorError,
        SeqGap,
        RangeInverted,
        QueueFull,
        PeerUnreachable,
        CoordinatorUnreachable,
        RequestTimeout,
        SubscriptionUnknown,
        NoCompletions,
        SpawnFailed,
        IOUnwritable,
        AddressInUse,
    )
}
_BY_CODE["PARAM_TYPE_MISMATCH"] = ParamError
_BY_CODE["PARAM_UNKNOWN"] = ParamError
_BY_CODE["EMPTY_FRAME"] = ProcessorError
_BY_CODE["UNKNOWN_TYPE"] = BadRequest


def error_for_code(code: str, message: str, detail: Any = None) -> OpsenseError:
    """Rebuild the typed exception for a code received over the wire."""
    cls = _BY_CODE.get(code, OpsenseError)
    return cls(message, code=code, detail=detail)
