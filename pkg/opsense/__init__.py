# Opsense package

from .client import AsyncPeerClient, PeerClient
from .config import VERSION as __version__
from .errors import OpsenseError

__all__ = [
    "__version__",
    "PeerClient",
    "AsyncPeerClient",
    "OpsenseError",
]
