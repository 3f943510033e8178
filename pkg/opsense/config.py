"""
Opsense — Centralized configuration
All environment variables and constants in a single place.
"""

import os
from pathlib import Path

# ── Paths ─────────────────────────────────────────────────────────────────────

_PACKAGE_ROOT = Path(__file__).parent
BUILTIN_PLUGIN_DIR = _PACKAGE_ROOT / "plugins"

# Plugin descriptors (<plugin_name>.plugin)
PLUGIN_DIR = os.getenv("OPSENSE_PLUGIN_DIR", str(BUILTIN_PLUGIN_DIR))

# Node config consumed by the ASGI app factory
CONFIG_PATH = os.getenv("OPSENSE_CONFIG", "")

# Append-only spill logs, one per sensor (unset = spill disabled)
SPILL_DIR = os.getenv("OPSENSE_SPILL_DIR", "")

# ── Server ────────────────────────────────────────────────────────────────────

HOST = os.getenv("OPSENSE_HOST", "127.0.0.1")
PORT = int(os.getenv("OPSENSE_PORT", "9100"))
LISTEN = os.getenv("OPSENSE_LISTEN", f"{HOST}:{PORT}")

# ── Wire protocol ─────────────────────────────────────────────────────────────

PROTOCOL_VERSION = "1"
HEARTBEAT_S = float(os.getenv("OPSENSE_HEARTBEAT", "10"))
FETCH_TIMEOUT_S = float(os.getenv("OPSENSE_FETCH_TIMEOUT", "30"))

# ── Query manager ─────────────────────────────────────────────────────────────

QUEUE_MAX = int(os.getenv("OPSENSE_QUEUE_MAX", "1024"))

# Unread enqueue_query() answers are dropped after this long
RESULT_TTL_S = float(os.getenv("OPSENSE_RESULT_TTL", "60"))

# Retention of finished bookkeeping
ROUND_TRIP_KEEP = int(os.getenv("OPSENSE_ROUND_TRIP_KEEP", "10000"))
CLOSED_STATS_KEEP = int(os.getenv("OPSENSE_CLOSED_STATS_KEEP", "256"))

# ── Reconnection policy ───────────────────────────────────────────────────────

BACKOFF_BASE_S = float(os.getenv("OPSENSE_BACKOFF_BASE", "0.25"))
BACKOFF_MAX_S = float(os.getenv("OPSENSE_BACKOFF_MAX", "8"))
BACKOFF_JITTER = float(os.getenv("OPSENSE_BACKOFF_JITTER", "0.2"))

# ── Virtual sensors ───────────────────────────────────────────────────────────

DEFAULT_SAMPLING_INTERVAL_MS = 1000
MIN_SAMPLING_INTERVAL_MS = 10

# Silence guard for rms_db (log10(0) is undefined)
DB_FLOOR = float(os.getenv("OPSENSE_DB_FLOOR", "-120"))

# ── Version ───────────────────────────────────────────────────────────────────

VERSION = "1.0.0"


def split_address(address: str) -> tuple[str, int]:
    """Split 'host:port' into its parts. A bare host gets the default port."""
    host, sep, port = address.rpartition(":")
    if not sep:
        return address, PORT
    return host or HOST, int(port)
