"""
Opsense — Node runner
Serves a node with uvicorn on a background thread. The socket is bound up
front so a taken port fails fast with ADDRESS_IN_USE and port 0 picks an
ephemeral port.
"""

from __future__ import annotations

import asyncio
import logging
import socket
import threading
import time
from collections.abc import Coroutine
from typing import Any, TypeVar

import uvicorn

from .. import config
from ..errors import AddressInUse, SpawnFailed
from .engine import Node

logger = logging.getLogger("opsense.node.runner")

T = TypeVar("T")


def bind_socket(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        raise AddressInUse(f"cannot listen on {host}:{port}: {exc}") from exc
    sock.set_inheritable(True)
    return sock


class NodeRunner:
    def __init__(self, node: Node, log_level: str = "warning"):
        self.node = node
        self.host, self.port = config.split_address(node.address)
        self.log_level = log_level
        self.loop: asyncio.AbstractEventLoop | None = None
        self._server: uvicorn.Server | None = None
        self._thread: threading.Thread | None = None
        self._error: BaseException | None = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self, timeout: float = 10.0) -> NodeRunner:
        # late import: main imports the node package
        from ..main import create_app

        sock = bind_socket(self.host, self.port)
        self.port = sock.getsockname()[1]
        self.node.address = self.address
        server_config = uvicorn.Config(
            create_app(self.node),
            log_level=self.log_level,
            lifespan="on",
            timeout_graceful_shutdown=1,
        )
        self._server = uvicorn.Server(server_config)
        self._thread = threading.Thread(target=self._serve, args=(sock,), name=f"node-{self.node.node_id}", daemon=True)
        self._thread.start()

        deadline = time.monotonic() + timeout
        while not self._server.started:
            if not self._thread.is_alive():
                raise SpawnFailed(f"node {self.node.node_id} exited during startup: {self._error}")
            if time.monotonic() > deadline:
                self.stop()
                raise SpawnFailed(f"node {self.node.node_id} did not start within {timeout}s")
            time.sleep(0.01)
        logger.info("Node %s serving on %s", self.node.node_id, self.address)
        return self

    def _serve(self, sock: socket.socket) -> None:
        async def serve() -> None:
            self.loop = asyncio.get_running_loop()
            assert self._server is not None
            await self._server.serve(sockets=[sock])

        try:
            asyncio.run(serve())
        except BaseException as exc:
            self._error = exc
            logger.exception("Node %s server crashed", self.node.node_id)
        finally:
            sock.close()

    def call(self, coro: Coroutine[Any, Any, T], timeout: float | None = None) -> T:
        """Run a coroutine on the node's loop from any thread and wait for its result."""
        if self.loop is None:
            coro.close()
            raise SpawnFailed("node is not running")
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    def stop(self, timeout: float = 10.0) -> None:
        if self._server is not None:
            self._server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout)
            self._thread = None

    def __enter__(self) -> NodeRunner:
        return self.start()

    def __exit__(self, *args: Any) -> None:
        self.stop()


def start_node(node: Node, log_level: str = "warning") -> NodeRunner:
    """Start serving and return the running handle."""
    return NodeRunner(node, log_level).start()
