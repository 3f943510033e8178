"""
Opsense — FastAPI application
API manager of one node: wire-frame endpoints for peers, persistent streams,
push delivery intake, plus a few JSON admin endpoints.
"""

from __future__ import annotations

import logging
import os
from contextlib import asynccontextmanager
from dataclasses import asdict
from typing import Any

from fastapi import Depends, FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from starlette.responses import Response, StreamingResponse

from . import config
from .client import PROTOCOL_HEADER
from .errors import BadRequest, OpsenseError, VersionMismatch
from .models import NodeConfig, SensorAnnouncement, SensorStatus, VirtualSensorConfig
from .node.engine import Node, load_node
from .node.service import chunk_bytes, request_head_bytes, response_head_bytes
from .wire import (
    MEDIA_TYPE,
    PATH_DELIVER,
    PATH_FRAME,
    PATH_LATEST,
    PATH_RANGE,
    PATH_REGISTER,
    PATH_SENSORS,
    PATH_STATUS,
    PATH_STREAM,
    PATH_SUBSCRIBE,
    Frame,
    FrameType,
    decode_frame,
    encode_frame,
    error_frame,
    hello_frame,
    http_status,
    load_file,
    loads_text,
    make_frame,
)

logger = logging.getLogger("opsense.main")


def _frame_response(frame: Frame, status_code: int = 200) -> Response:
    return Response(content=encode_frame(frame), media_type=MEDIA_TYPE, status_code=status_code)


def _node(request: Request) -> Node:
    return request.app.state.node


def _check_protocol(request: Request) -> None:
    """A peer announcing another protocol version is refused before anything else runs."""
    version = request.headers.get(PROTOCOL_HEADER)
    if version is not None and version != config.PROTOCOL_VERSION:
        raise VersionMismatch(f"protocol {version!r} not supported, this node speaks {config.PROTOCOL_VERSION!r}")


def _peer_address(request: Request) -> str:
    return f"{request.client.host}:{request.client.port}" if request.client else "unknown"


async def _read_frame(request: Request, expected: FrameType | None = None) -> Frame:
    frame = decode_frame(await request.body())
    if expected is not None and frame.type != expected:
        raise BadRequest(f"expected a {expected} frame, got {frame.type}")
    return frame


def _sensor_list(node: Node) -> dict[str, Any]:
    return {"node_id": node.node_id, "sensors": [s.model_dump(mode="json") for s in node.announce()]}


# ── Frame dispatch ───────────────────────────────────────────────────────────


async def dispatch(node: Node, frame: Frame, request: Request) -> Frame:
    """Answer one request frame with its response frame (same id)."""
    body = frame.body
    if frame.type == FrameType.HELLO:
        version = body.get("version")
        if version != config.PROTOCOL_VERSION:
            raise VersionMismatch(f"hello with protocol {version!r}, expected {config.PROTOCOL_VERSION!r}")
        reply = hello_frame(node.node_id)
        return reply.model_copy(update={"id": frame.id})

    if frame.type == FrameType.REGISTER:
        try:
            sensors = [SensorAnnouncement.model_validate(s) for s in body.get("sensors", [])]
            entry = node.coordinator.register(str(body["node_id"]), str(body["address"]), sensors)
        except (KeyError, ValueError) as exc:
            raise BadRequest(f"invalid registration: {exc}") from exc
        return make_frame(FrameType.REGISTER_ACK, entry.model_dump(mode="json"), id=frame.id)

    if frame.type == FrameType.LIST_SENSORS:
        return make_frame(FrameType.SENSOR_LIST, _sensor_list(node), id=frame.id)

    if frame.type == FrameType.QUERY:
        kind = body.get("kind", "latest_n")
        if kind not in ("latest_n", "range") or "sensor" not in body:
            raise BadRequest("query needs a sensor and kind latest_n or range")
        result = await node.query(str(body["sensor"]), kind, dict(body.get("params", {})), _peer_address(request))
        return make_frame(FrameType.QUERY_RESULT, result.model_dump(mode="json"), id=frame.id)

    if frame.type == FrameType.SUBSCRIBE:
        mode = body.get("mode", "persistent_stream")
        if mode not in ("persistent_stream", "push") or "sensor" not in body or "subscriber" not in body:
            raise BadRequest("subscribe needs sensor, subscriber and mode persistent_stream or push")
        persistent = body.get("persistent_delivery", True)
        if not isinstance(persistent, bool):
            raise BadRequest(f"persistent_delivery must be true or false, got {persistent!r}")
        sub = node.subscribe(str(body["sensor"]), str(body["subscriber"]), mode, persistent)
        return make_frame(FrameType.SUBSCRIBE_ACK, sub.model_dump(mode="json"), id=frame.id)

    if frame.type == FrameType.DELIVER:
        node.inbox.connected(frame.id, (request.client.host, request.client.port) if request.client else None)
        return node.inbox.receive(frame)

    if frame.type == FrameType.STATUS:
        return make_frame(FrameType.STATUS, node.status().model_dump(mode="json"), id=frame.id)

    raise BadRequest(f"{frame.type} is a response frame, not a request")


# ── App factory ──────────────────────────────────────────────────────────────


@asynccontextmanager
async def lifespan(app: FastAPI):
    node: Node = app.state.node
    await node.start()
    yield
    await node.stop()


def create_app(node: Node) -> FastAPI:
    app = FastAPI(
        title="Opsense",
        description="Sensor-stream node: virtual sensors, sliding windows, queries and subscriptions over HTTP.",
        version=config.VERSION,
        lifespan=lifespan,
        dependencies=[Depends(_check_protocol)],
    )
    app.state.node = node

    @app.exception_handler(OpsenseError)
    async def _opsense_error_handler(request: Request, exc: OpsenseError) -> Response:
        if http_status(exc.code) >= 500:
            logger.warning("%s %s failed: %s", request.method, request.url.path, exc)
        return _frame_response(error_frame(exc), http_status(exc.code))

    @app.exception_handler(RequestValidationError)
    async def _validation_error_handler(request: Request, exc: RequestValidationError) -> Response:
        err = BadRequest("invalid request", detail=[{"loc": list(e["loc"]), "msg": e["msg"]} for e in exc.errors()])
        return _frame_response(error_frame(err), 400)

    # Global handler for unhandled exceptions; no stack trace reaches the peer
    @app.exception_handler(Exception)
    async def _global_exception_handler(request: Request, exc: Exception) -> Response:
        logger.error("Unhandled error: %s", exc, exc_info=True)
        return _frame_response(error_frame(OpsenseError("internal error")), 500)

    _add_frame_routes(app)
    _add_admin_routes(app)
    return app


# ── Wire endpoints ───────────────────────────────────────────────────────────


def _add_frame_routes(app: FastAPI) -> None:
    @app.post(PATH_FRAME)
    async def frame_endpoint(request: Request) -> Response:
        """Generic endpoint: any request frame in, its response frame out."""
        frame = await _read_frame(request)
        return _frame_response(await dispatch(_node(request), frame, request))

    @app.post(PATH_REGISTER)
    async def register(request: Request) -> Response:
        frame = await _read_frame(request, FrameType.REGISTER)
        return _frame_response(await dispatch(_node(request), frame, request))

    @app.get(PATH_SENSORS)
    async def list_sensors(request: Request) -> Response:
        return _frame_response(make_frame(FrameType.SENSOR_LIST, _sensor_list(_node(request))))

    @app.get(PATH_LATEST)
    async def latest(request: Request, name: str, n: int = Query(1, ge=1)) -> Response:
        result = await _node(request).query(name, "latest_n", {"n": n}, _peer_address(request))
        return _frame_response(make_frame(FrameType.QUERY_RESULT, result.model_dump(mode="json"), id=result.job_id))

    @app.get(PATH_RANGE)
    async def range_query(
        request: Request,
        name: str,
        from_ts: int = Query(..., alias="from"),
        to_ts: int = Query(..., alias="to"),
    ) -> Response:
        result = await _node(request).query(name, "range", {"from": from_ts, "to": to_ts}, _peer_address(request))
        return _frame_response(make_frame(FrameType.QUERY_RESULT, result.model_dump(mode="json"), id=result.job_id))

    @app.get(PATH_STREAM)
    async def stream(request: Request, name: str, subscription: str | None = Query(None)) -> StreamingResponse:
        """
        Persistent stream. With ?subscription= the stream resumes that
        subscription from its cursor; without it an ad hoc subscription lives
        as long as the connection. The first line is the subscribe_ack.
        """
        node = _node(request)
        ad_hoc = subscription is None
        if ad_hoc:
            sub = node.subscribe(name, _peer_address(request), "persistent_stream", persistent_delivery=False)
        else:
            sub = node.service.get(subscription)
            if sub.sensor != name:
                raise BadRequest(f"subscription {sub.id} is for sensor {sub.sensor!r}, not {name!r}")
        node.service.open_stream(sub.id)
        ack = encode_frame(make_frame(FrameType.SUBSCRIBE_ACK, sub.model_dump(mode="json"), id=sub.id))

        async def frames():
            try:
                yield ack
                async for line in node.service.stream_frames(sub):
                    yield line
            finally:
                if ad_hoc:
                    node.service.unsubscribe(sub.id)

        response = StreamingResponse(frames(), media_type=MEDIA_TYPE, headers={"Cache-Control": "no-cache"})
        target = request.url.path + (f"?{request.url.query}" if request.url.query else "")
        node.service.record_handshake(
            sub.id,
            request_head_bytes(request.method, target, request.headers.raw)
            + response_head_bytes(response.status_code, "OK", response.raw_headers)
            + chunk_bytes(len(ack.encode("utf-8"))),
        )
        return response

    @app.post(PATH_SUBSCRIBE)
    async def subscribe(request: Request) -> Response:
        frame = await _read_frame(request, FrameType.SUBSCRIBE)
        return _frame_response(await dispatch(_node(request), frame, request))

    @app.delete(PATH_SUBSCRIBE + "/{subscription_id}")
    async def unsubscribe(request: Request, subscription_id: str) -> Response:
        node = _node(request)
        sub = node.service.get(subscription_id)
        node.service.unsubscribe(sub.id)
        return _frame_response(make_frame(FrameType.STATUS, {"unsubscribed": sub.id}, id=sub.id))

    @app.post(PATH_DELIVER)
    async def deliver(request: Request) -> Response:
        frame = await _read_frame(request, FrameType.DELIVER)
        return _frame_response(await dispatch(_node(request), frame, request))

    @app.get(PATH_STATUS)
    async def status(request: Request) -> Response:
        return _frame_response(make_frame(FrameType.STATUS, _node(request).status().model_dump(mode="json")))


# ── Admin endpoints (JSON) ───────────────────────────────────────────────────


def _add_admin_routes(app: FastAPI) -> None:
    @app.post(PATH_SENSORS, status_code=201, response_model=SensorStatus)
    async def add_sensor(request: Request) -> SensorStatus:
        cfg = loads_text((await request.body()).decode("utf-8"), VirtualSensorConfig)
        return _node(request).add_sensor(cfg).status()

    @app.put("/sensor/{name}", response_model=SensorStatus)
    async def update_sensor(request: Request, name: str) -> SensorStatus:
        cfg = loads_text((await request.body()).decode("utf-8"), VirtualSensorConfig)
        if cfg.name != name:
            raise BadRequest(f"config names sensor {cfg.name!r}, path names {name!r}")
        return _node(request).update_sensor(cfg).status()

    @app.delete("/sensor/{name}")
    async def remove_sensor(request: Request, name: str) -> dict[str, str]:
        _node(request).remove_sensor(name)
        return {"removed": name}

    @app.put("/sensor/{name}/history")
    async def set_history(request: Request, name: str, size: int = Query(..., ge=1)) -> dict[str, Any]:
        evicted = _node(request).set_history_size(name, size)
        return {"sensor": name, "history_size": size, "evicted": len(evicted)}

    @app.get("/peers")
    async def peers(request: Request) -> dict[str, Any]:
        return {"peers": [p.model_dump(mode="json") for p in _node(request).coordinator.peers()]}

    @app.get("/plugins")
    async def plugins(request: Request) -> dict[str, Any]:
        registry = _node(request).registry
        return {
            "plugins": [d.model_dump(mode="json") for d in registry.descriptors()],
            "diagnostics": [{"file": d.file, "message": d.message} for d in registry.diagnostics],
        }

    @app.post("/plugins/rediscover")
    async def rediscover(request: Request) -> dict[str, Any]:
        result = _node(request).rediscover_plugins()
        return {
            "plugins": [d.plugin_name for d in result.descriptors],
            "diagnostics": [{"file": d.file, "message": d.message} for d in result.diagnostics],
        }

    @app.get("/inbox")
    async def inbox(request: Request) -> dict[str, Any]:
        node = _node(request)
        return {
            "subscriptions": [s.model_dump(mode="json") for s in node.inbox.stats()],
            "round_trips": node.round_trip_count,
        }

    @app.get("/deliveries")
    async def deliveries(request: Request) -> dict[str, Any]:
        """Sending-side counters per subscription (connections, bytes on the wire)."""
        service = _node(request).service
        out = []
        for sub_id, stats in [*service.stats.items(), *service.closed.items()]:
            sub = service.subscriptions.get(sub_id)
            out.append(
                {
                    "subscription": sub_id,
                    "sensor": sub.sensor if sub else "",
                    "mode": sub.mode if sub else "",
                    "cursor": sub.cursor if sub else -1,
                    **asdict(stats),
                }
            )
        return {"deliveries": out}

    @app.get("/health")
    async def health(request: Request) -> JSONResponse:
        node = _node(request)
        return JSONResponse({"status": "ok", "node_id": node.node_id, "version": config.VERSION})


def app_from_env() -> FastAPI:
    """uvicorn factory: `uvicorn opsense.main:app_from_env --factory` with OPSENSE_CONFIG set."""
    path = os.getenv("OPSENSE_CONFIG", config.CONFIG_PATH)
    if not path:
        raise OpsenseError("OPSENSE_CONFIG is not set", code="CONFIG_INVALID")
    return create_app(load_node(load_file(path, NodeConfig)))
