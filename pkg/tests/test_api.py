"""
Opsense — API tests
Fast, no-network, uses TestClient (ASGI in-process). The lifespan starts the
node, so one element is sampled at startup.
"""

import time

import pytest
from fastapi.testclient import TestClient

from opsense.main import create_app
from opsense.models import StreamElement
from opsense.wire import (
    FrameType,
    decode_frame,
    deliver_frame,
    dumps_text,
    encode_frame,
    hello_frame,
    make_frame,
)

from .conftest import EPOCH, sensor_cfg

HEADERS = {"X-Opsense-Protocol": "1"}


def _frame(r):
    return decode_frame(r.text)


@pytest.fixture
def node(make_node):
    return make_node(sensor_cfg(history_size=5, sampling_interval=60_000))


@pytest.fixture
def client(node):
    with TestClient(create_app(node), headers=HEADERS) as c:
        # the sampling task stores seq 0 right after startup
        while node.store("walk").total_inserted == 0:
            time.sleep(0.01)
        yield c


class TestHealth:
    def test_health_returns_ok(self, client):
        r = client.get("/health")
        assert r.status_code == 200
        assert r.json()["status"] == "ok"
        assert r.json()["node_id"] == "n1"

    def test_status_frame(self, client):
        frame = _frame(client.get("/status"))
        assert frame.type == FrameType.STATUS
        assert frame.body["active_sensors"] == 1


class TestProtocol:
    def test_version_mismatch_header(self, client):
        r = client.get("/sensors", headers={"X-Opsense-Protocol": "2"})
        assert r.status_code == 400
        assert _frame(r).body["code"] == "VERSION_MISMATCH"

    def test_hello_answered_in_kind(self, client):
        request = hello_frame("peer")
        frame = _frame(client.post("/frame", content=encode_frame(request)))
        assert (frame.type, frame.id, frame.body["node_id"]) == (FrameType.HELLO, request.id, "n1")

    def test_hello_with_other_version(self, client):
        r = client.post("/frame", content=encode_frame(hello_frame("peer", version="9")))
        assert r.status_code == 400
        assert _frame(r).body["code"] == "VERSION_MISMATCH"

    def test_unknown_frame_type(self, client):
        r = client.post("/frame", content='{"type":"gossip","id":"1","body":{}}')
        assert r.status_code == 400
        assert _frame(r).body["code"] == "UNKNOWN_TYPE"

    def test_malformed_body(self, client):
        r = client.post("/frame", content="not json")
        assert r.status_code == 400
        assert _frame(r).type == FrameType.ERROR

    def test_response_frame_is_not_a_request(self, client):
        r = client.post("/frame", content=encode_frame(make_frame(FrameType.DELIVER_ACK, {"seq": 1})))
        assert r.status_code == 400

    def test_wrong_frame_on_typed_endpoint(self, client):
        r = client.post("/register", content=encode_frame(make_frame(FrameType.STATUS)))
        assert r.status_code == 400


class TestQueries:
    def test_list_sensors(self, client):
        frame = _frame(client.get("/sensors"))
        assert frame.type == FrameType.SENSOR_LIST
        assert [s["name"] for s in frame.body["sensors"]] == ["walk"]

    def test_thirteen_sensors_listed(self, make_node):
        names = [f"s{i:02d}" for i in range(13)]
        node = make_node(*(sensor_cfg(name=n, sampling_interval=60_000) for n in names))
        with TestClient(create_app(node), headers=HEADERS) as c:
            listing = _frame(c.get("/sensors"))
            status = _frame(c.get("/status"))
        assert [s["name"] for s in listing.body["sensors"]] == names
        assert status.body["active_sensors"] == 13
        assert [s["name"] for s in status.body["sensors"]] == names

    def test_latest_newest_first(self, client, node):
        node.tick("walk", now=EPOCH + 1000)
        frame = _frame(client.get("/sensor/walk/latest", params={"n": 5}))
        assert frame.type == FrameType.QUERY_RESULT
        assert frame.id == frame.body["job_id"]
        assert [e["seq"] for e in frame.body["elements"]] == [1, 0]
        assert frame.body["server_ms"] >= 0

    def test_range_inclusive(self, client, node):
        node.tick("walk", now=EPOCH + 1000)
        node.tick("walk", now=EPOCH + 2000)
        r = client.get("/sensor/walk/range", params={"from": EPOCH + 1000, "to": EPOCH + 2000})
        assert [e["seq"] for e in _frame(r).body["elements"]] == [1, 2]

    def test_range_inverted(self, client):
        r = client.get("/sensor/walk/range", params={"from": 10, "to": 1})
        assert r.status_code == 400
        assert _frame(r).body["code"] == "RANGE_INVERTED"

    def test_unknown_sensor(self, client):
        r = client.get("/sensor/ghost/latest")
        assert r.status_code == 404
        assert _frame(r).body["code"] == "SENSOR_UNKNOWN"

    def test_invalid_n(self, client):
        r = client.get("/sensor/walk/latest", params={"n": 0})
        assert r.status_code == 400
        assert _frame(r).body["code"] == "BAD_REQUEST"

    def test_query_frame(self, client):
        request = make_frame(FrameType.QUERY, {"sensor": "walk", "kind": "latest_n", "params": {"n": 1}})
        frame = _frame(client.post("/frame", content=encode_frame(request)))
        assert (frame.type, frame.id) == (FrameType.QUERY_RESULT, request.id)
        assert len(frame.body["elements"]) == 1


class TestRegistration:
    def test_register_then_peers(self, client):
        body = {"node_id": "edge", "address": "127.0.0.1:9200", "sensors": [{"name": "t", "output_schema": []}]}
        frame = _frame(client.post("/register", content=encode_frame(make_frame(FrameType.REGISTER, body))))
        assert frame.type == FrameType.REGISTER_ACK
        peers = client.get("/peers").json()["peers"]
        assert [(p["node_id"], p["address"]) for p in peers] == [("edge", "127.0.0.1:9200")]

    def test_register_without_sensors(self, client):
        body = {"node_id": "edge", "address": "127.0.0.1:9200", "sensors": []}
        r = client.post("/register", content=encode_frame(make_frame(FrameType.REGISTER, body)))
        assert r.status_code == 400

    def test_register_missing_fields(self, client):
        r = client.post("/register", content=encode_frame(make_frame(FrameType.REGISTER, {"node_id": "edge"})))
        assert r.status_code == 400


class TestSubscriptions:
    def _subscribe(self, client, mode="push"):
        body = {"sensor": "walk", "subscriber": "127.0.0.1:1", "mode": mode}
        return _frame(client.post("/subscribe", content=encode_frame(make_frame(FrameType.SUBSCRIBE, body))))

    def test_subscribe_and_unsubscribe(self, client):
        ack = self._subscribe(client, mode="persistent_stream")
        assert ack.type == FrameType.SUBSCRIBE_ACK
        assert ack.body["cursor"] == 0
        r = client.delete(f"/subscribe/{ack.body['id']}")
        assert _frame(r).body == {"unsubscribed": ack.body["id"]}
        r = client.delete(f"/subscribe/{ack.body['id']}")
        assert r.status_code == 404
        assert _frame(r).body["code"] == "SUBSCRIPTION_UNKNOWN"

    def test_bad_mode(self, client):
        body = {"sensor": "walk", "subscriber": "x:1", "mode": "carrier_pigeon"}
        r = client.post("/subscribe", content=encode_frame(make_frame(FrameType.SUBSCRIBE, body)))
        assert r.status_code == 400

    @pytest.mark.parametrize("value", ["false", 0, None])
    def test_persistent_delivery_must_be_bool(self, client, node, value):
        body = {"sensor": "walk", "subscriber": "x:1", "mode": "push", "persistent_delivery": value}
        r = client.post("/subscribe", content=encode_frame(make_frame(FrameType.SUBSCRIBE, body)))
        assert r.status_code == 400
        assert _frame(r).body["code"] == "BAD_REQUEST"
        assert not node.service.subscriptions

    def test_persistent_delivery_false_is_honoured(self, client, node):
        body = {"sensor": "walk", "subscriber": "x:1", "mode": "push", "persistent_delivery": False}
        ack = _frame(client.post("/subscribe", content=encode_frame(make_frame(FrameType.SUBSCRIBE, body))))
        assert ack.body["persistent_delivery"] is False
        assert node.service.get(ack.body["id"]).persistent_delivery is False

    def test_deliveries_lists_subscription(self, client):
        ack = self._subscribe(client, mode="persistent_stream")
        rows = client.get("/deliveries").json()["deliveries"]
        assert [(r["subscription"], r["mode"], r["connections"]) for r in rows] == [
            (ack.body["id"], "persistent_stream", 0)
        ]

    def test_stream_for_wrong_sensor(self, client):
        client.post("/sensors", content=dumps_text(sensor_cfg(name="other", sampling_interval=60_000)))
        ack = self._subscribe(client, mode="persistent_stream")
        r = client.get("/sensor/other/stream", params={"subscription": ack.body["id"]})
        assert r.status_code == 400

    def test_stream_for_push_subscription(self, client):
        ack = self._subscribe(client, mode="push")
        r = client.get("/sensor/walk/stream", params={"subscription": ack.body["id"]})
        assert r.status_code == 400


class TestDeliverIntake:
    def test_deliver_acknowledged_and_deduplicated(self, client):
        element = StreamElement(sensor="remote", seq=3, timestamp=EPOCH, values=(1.0,))
        frame = deliver_frame(element, "sub-1", gap=3)
        for _ in range(2):
            ack = _frame(client.post("/deliver", content=encode_frame(frame)))
            assert (ack.type, ack.id, ack.body["seq"]) == (FrameType.DELIVER_ACK, "sub-1", 3)
        (stats,) = client.get("/inbox").json()["subscriptions"]
        assert (stats["received"], stats["duplicates"], stats["gap_elements"]) == (1, 1, 3)

    def test_malformed_element(self, client):
        frame = make_frame(FrameType.DELIVER, {"sensor": "x", "seq": -1}, id="s")
        r = client.post("/deliver", content=encode_frame(frame))
        assert r.status_code == 400


class TestAdmin:
    def test_add_update_resize_remove(self, client, node):
        r = client.post("/sensors", content=dumps_text(sensor_cfg(name="extra", sampling_interval=60_000)))
        assert r.status_code == 201
        assert r.json()["name"] == "extra"

        cfg = sensor_cfg(
            name="extra", history_size=3, plugin="constant", params={"value": 2.0}, sampling_interval=60_000
        )
        r = client.put("/sensor/extra", content=dumps_text(cfg))
        assert r.status_code == 200
        assert r.json()["plugin"] == "constant"

        for t in range(3):
            node.tick("extra", now=EPOCH + 10 + t)
        r = client.put("/sensor/extra/history", params={"size": 1})
        assert r.json()["history_size"] == 1
        assert r.json()["evicted"] >= 2

        assert client.delete("/sensor/extra").json() == {"removed": "extra"}
        assert [s["name"] for s in _frame(client.get("/sensors")).body["sensors"]] == ["walk"]

    def test_update_name_mismatch(self, client):
        r = client.put("/sensor/walk", content=dumps_text(sensor_cfg(name="other")))
        assert r.status_code == 400

    def test_add_invalid_config(self, client):
        r = client.post("/sensors", content=dumps_text(sensor_cfg(name="bad", history_size=0)))
        assert r.status_code == 422
        assert _frame(r).body["code"] == "CONFIG_INVALID"

    def test_plugins_and_rediscover(self, client):
        names = {p["plugin_name"] for p in client.get("/plugins").json()["plugins"]}
        assert {"sine", "sine_audio", "random_walk", "constant"} <= names
        assert "sine" in client.post("/plugins/rediscover").json()["plugins"]
