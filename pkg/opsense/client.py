"""
Opsense — Peer client
Typed client for talking to another node over the wire protocol.
Supports both synchronous (PeerClient) and asynchronous (AsyncPeerClient) usage.

Usage:
    from opsense.client import PeerClient

    with PeerClient("127.0.0.1:9100") as peer:
        peer.hello()
        result = peer.latest("noise", n=3)
"""

from __future__ import annotations

from typing import Any

import httpx

from . import config
from .errors import (
    CoordinatorUnreachable,
    OpsenseError,
    PeerUnreachable,
    RequestTimeout,
    VersionMismatch,
    error_for_code,
)
from .models import DeliveryMode, NodeStatus, PeerRegistration, QueryResult, SensorAnnouncement, Subscription
from .wire import (
    MEDIA_TYPE,
    PATH_DELIVER,
    PATH_LATEST,
    PATH_RANGE,
    PATH_REGISTER,
    PATH_SENSORS,
    PATH_STATUS,
    PATH_SUBSCRIBE,
    Frame,
    FrameType,
    decode_frame,
    encode_frame,
    hello_frame,
    make_frame,
)

PROTOCOL_HEADER = "X-Opsense-Protocol"

# ── Helpers ──────────────────────────────────────────────────────────────────


def base_url_for(address: str) -> str:
    """'host:port' or a full URL -> base URL."""
    if address.startswith(("http://", "https://")):
        return address.rstrip("/")
    return f"http://{address}"


def _raise_for_status(response: httpx.Response) -> None:
    """Converts error frames into the typed exception for their code."""
    if response.is_success:
        return
    try:
        frame = decode_frame(response.content)
    except OpsenseError:
        raise OpsenseError(f"HTTP {response.status_code}: {response.text[:200]}") from None
    if frame.type != FrameType.ERROR:
        raise OpsenseError(f"HTTP {response.status_code} with a {frame.type} frame")
    body = frame.body
    raise error_for_code(body.get("code", "INTERNAL"), body.get("message", ""), body.get("detail"))


def _expect(response: httpx.Response, expected: FrameType) -> Frame:
    _raise_for_status(response)
    frame = decode_frame(response.content)
    if frame.type != expected:
        raise OpsenseError(f"expected a {expected} frame, got {frame.type}")
    return frame


def _transport_error(exc: httpx.TransportError, url: str) -> OpsenseError:
    if isinstance(exc, httpx.TimeoutException):
        return RequestTimeout(f"{url}: timed out")
    return PeerUnreachable(f"{url}: {exc}")


def _build_headers() -> dict[str, str]:
    return {PROTOCOL_HEADER: config.PROTOCOL_VERSION, "Accept": MEDIA_TYPE}


def _frame_content(frame: Frame) -> dict[str, Any]:
    return {"content": encode_frame(frame), "headers": {"Content-Type": MEDIA_TYPE}}


def _registration_frame(node_id: str, address: str, sensors: list[SensorAnnouncement]) -> Frame:
    body = {
        "node_id": node_id,
        "address": address,
        "sensors": [s.model_dump(mode="json") for s in sensors],
    }
    return make_frame(FrameType.REGISTER, body)


def _subscribe_frame(sensor: str, subscriber: str, mode: DeliveryMode, persistent_delivery: bool) -> Frame:
    body = {"sensor": sensor, "subscriber": subscriber, "mode": mode, "persistent_delivery": persistent_delivery}
    return make_frame(FrameType.SUBSCRIBE, body)


def _check_hello(frame: Frame) -> Frame:
    version = frame.body.get("version")
    if version != config.PROTOCOL_VERSION:
        raise VersionMismatch(f"peer speaks protocol {version!r}, expected {config.PROTOCOL_VERSION!r}")
    return frame


# ── Synchronous client ───────────────────────────────────────────────────────


class PeerClient:
    """
    Synchronous client for one peer node.

    Args:
        address: 'host:port' or base URL of the peer
        timeout: request timeout in seconds (default: OPSENSE_FETCH_TIMEOUT)
        transport: optional httpx transport (tests mount the ASGI app here)
    """

    def __init__(
        self,
        address: str,
        timeout: float = config.FETCH_TIMEOUT_S,
        transport: httpx.BaseTransport | None = None,
    ):
        self.address = address
        self.base_url = base_url_for(address)
        self._client = httpx.Client(
            base_url=self.base_url, headers=_build_headers(), timeout=timeout, transport=transport
        )

    def __enter__(self) -> PeerClient:
        return self

    def __exit__(self, *args: Any) -> None:
        self.close()

    def close(self) -> None:
        self._client.close()

    def _request(self, method: str, path: str, **kwargs: Any) -> httpx.Response:
        try:
            return self._client.request(method, path, **kwargs)
        except httpx.TransportError as exc:
            raise _transport_error(exc, self.base_url + path) from exc

    def hello(self, node_id: str = "") -> Frame:
        r = self._request("POST", "/frame", **_frame_content(hello_frame(node_id)))
        return _check_hello(_expect(r, FrameType.HELLO))

    def register(self, node_id: str, address: str, sensors: list[SensorAnnouncement]) -> PeerRegistration:
        try:
            r = self._request("POST", PATH_REGISTER, **_frame_content(_registration_frame(node_id, address, sensors)))
        except PeerUnreachable as exc:
            raise CoordinatorUnreachable(str(exc)) from exc
        return PeerRegistration.model_validate(_expect(r, FrameType.REGISTER_ACK).body)

    def sensors(self) -> list[SensorAnnouncement]:
        r = self._request("GET", PATH_SENSORS)
        body = _expect(r, FrameType.SENSOR_LIST).body
        return [SensorAnnouncement.model_validate(s) for s in body.get("sensors", [])]

    def latest(self, sensor: str, n: int = 1) -> QueryResult:
        r = self._request("GET", PATH_LATEST.format(name=sensor), params={"n": n})
        return QueryResult.model_validate(_expect(r, FrameType.QUERY_RESULT).body)

    def range(self, sensor: str, from_ts: int, to_ts: int) -> QueryResult:
        r = self._request("GET", PATH_RANGE.format(name=sensor), params={"from": from_ts, "to": to_ts})
        return QueryResult.model_validate(_expect(r, FrameType.QUERY_RESULT).body)

    def subscribe(
        self,
        sensor: str,
        subscriber: str,
        mode: DeliveryMode = "persistent_stream",
        persistent_delivery: bool = True,
    ) -> Subscription:
        frame = _subscribe_frame(sensor, subscriber, mode, persistent_delivery)
        r = self._request("POST", PATH_SUBSCRIBE, **_frame_content(frame))
        return Subscription.model_validate(_expect(r, FrameType.SUBSCRIBE_ACK).body)

    def unsubscribe(self, subscription_id: str) -> bool:
        r = self._request("DELETE", f"{PATH_SUBSCRIBE}/{subscription_id}")
        if r.status_code == 404:
            return False
        _raise_for_status(r)
        return True

    def deliver(self, frame: Frame) -> Frame:
        r = self._request("POST", PATH_DELIVER, **_frame_content(frame))
        return _expect(r, FrameType.DELIVER_ACK)

    def status(self) -> NodeStatus:
        r = self._request("GET", PATH_STATUS)
        return NodeStatus.model_validate(_expect(r, FrameType.STATUS).body)

    def send(self, frame: Frame) -> Frame:
        """Any request frame through the generic endpoint."""
        r = self._request("POST", "/frame", **_frame_content(frame))
        _raise_for_status(r)
        return decode_frame(r.content)

    def peers(self) -> list[PeerRegistration]:
        r = self._request("GET", "/peers")
        _raise_for_status(r)
        return [PeerRegistration.model_validate(p) for p in r.json()["peers"]]

    def inbox(self) -> dict[str, Any]:
        r = self._request("GET", "/inbox")
        _raise_for_status(r)
        return r.json()


# ── Asynchronous client ──────────────────────────────────────────────────────


class AsyncPeerClient:
    """Asynchronous twin of PeerClient, used by nodes to fetch from and register with peers."""

    def __init__(
        self,
        address: str,
        timeout: float = config.FETCH_TIMEOUT_S,
        transport: httpx.AsyncBaseTransport | None = None,
    ):
        self.address = address
        self.base_url = base_url_for(address)
        self._client = httpx.AsyncClient(
            base_url=self.base_url, headers=_build_headers(), timeout=timeout, transport=transport
        )

    async def __aenter__(self) -> AsyncPeerClient:
        return self

    async def __aexit__(self, *args: Any) -> None:
        await self.close()

    async def close(self) -> None:
        await self._client.aclose()

    async def _request(self, method: str, path: str, **kwargs: Any) -> httpx.Response:
        try:
            return await self._client.request(method, path, **kwargs)
        except httpx.TransportError as exc:
            raise _transport_error(exc, self.base_url + path) from exc

    async def hello(self, node_id: str = "") -> Frame:
        r = await self._request("POST", "/frame", **_frame_content(hello_frame(node_id)))
        return _check_hello(_expect(r, FrameType.HELLO))

    async def register(self, node_id: str, address: str, sensors: list[SensorAnnouncement]) -> PeerRegistration:
        frame = _registration_frame(node_id, address, sensors)
        try:
            r = await self._request("POST", PATH_REGISTER, **_frame_content(frame))
        except PeerUnreachable as exc:
            raise CoordinatorUnreachable(str(exc)) from exc
        return PeerRegistration.model_validate(_expect(r, FrameType.REGISTER_ACK).body)

    async def sensors(self) -> list[SensorAnnouncement]:
        r = await self._request("GET", PATH_SENSORS)
        body = _expect(r, FrameType.SENSOR_LIST).body
        return [SensorAnnouncement.model_validate(s) for s in body.get("sensors", [])]

    async def latest(self, sensor: str, n: int = 1) -> QueryResult:
        r = await self._request("GET", PATH_LATEST.format(name=sensor), params={"n": n})
        return QueryResult.model_validate(_expect(r, FrameType.QUERY_RESULT).body)

    async def range(self, sensor: str, from_ts: int, to_ts: int) -> QueryResult:
        r = await self._request("GET", PATH_RANGE.format(name=sensor), params={"from": from_ts, "to": to_ts})
        return QueryResult.model_validate(_expect(r, FrameType.QUERY_RESULT).body)

    async def subscribe(
        self,
        sensor: str,
        subscriber: str,
        mode: DeliveryMode = "persistent_stream",
        persistent_delivery: bool = True,
    ) -> Subscription:
        frame = _subscribe_frame(sensor, subscriber, mode, persistent_delivery)
        r = await self._request("POST", PATH_SUBSCRIBE, **_frame_content(frame))
        return Subscription.model_validate(_expect(r, FrameType.SUBSCRIBE_ACK).body)

    async def unsubscribe(self, subscription_id: str) -> bool:
        r = await self._request("DELETE", f"{PATH_SUBSCRIBE}/{subscription_id}")
        if r.status_code == 404:
            return False
        _raise_for_status(r)
        return True

    async def status(self) -> NodeStatus:
        r = await self._request("GET", PATH_STATUS)
        return NodeStatus.model_validate(_expect(r, FrameType.STATUS).body)
