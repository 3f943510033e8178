"""
Opsense — Wire format tests
Frame codec (fixed key order, strict decoding) and the structured-text
format used for configs.
"""

import json
import random
import string

import pytest

from opsense.errors import BadRequest, ConfigInvalid
from opsense.models import NodeConfig, ProcessorSpec, StreamElement, VirtualSensorConfig
from opsense.wire import (
    Frame,
    FrameType,
    decode_frame,
    decode_frames,
    deliver_frame,
    dumps_text,
    element_size,
    encode_element,
    encode_frame,
    error_frame,
    http_status,
    loads_text,
    make_frame,
)

from .conftest import sensor_cfg


def _random_value(rng: random.Random):
    roll = rng.random()
    if roll < 0.15:
        return rng.randint(-(2**53), 2**53)
    if roll < 0.3:
        return "".join(rng.choice(string.printable + "éü✓") for _ in range(rng.randint(0, 12)))
    if roll < 0.4:
        return rng.choice([True, False, None])
    return rng.uniform(-1e12, 1e12) * rng.choice([1, 1e-12, 1e-300])


def _random_body(rng: random.Random, depth: int = 0) -> dict:
    body = {}
    for _ in range(rng.randint(0, 5)):
        key = "".join(rng.choice(string.ascii_letters) for _ in range(rng.randint(1, 8)))
        roll = rng.random()
        if depth < 2 and roll < 0.15:
            body[key] = _random_body(rng, depth + 1)
        elif roll < 0.3:
            body[key] = [_random_value(rng) for _ in range(rng.randint(0, 4))]
        else:
            body[key] = _random_value(rng)
    return body


class TestFrameCodec:
    def test_key_order(self):
        line = encode_frame(make_frame(FrameType.DELIVER, {"seq": 1}, id="s1", gap=3))
        assert line == '{"type":"deliver","id":"s1","gap":3,"body":{"seq":1}}\n'

    def test_gap_omitted_when_absent(self):
        assert '"gap"' not in encode_frame(make_frame(FrameType.STATUS, {}, id="x"))

    def test_one_line_per_frame(self):
        line = encode_frame(make_frame(FrameType.STATUS, {"text": "a\nb"}, id="x"))
        assert line.count("\n") == 1

    def test_round_trip_randomized(self):
        rng = random.Random(2024)
        types = list(FrameType)
        for _ in range(1000):
            frame = Frame(
                type=rng.choice(types),
                id="".join(rng.choice(string.hexdigits) for _ in range(rng.randint(0, 16))),
                body=_random_body(rng),
                gap=rng.choice([None, rng.randint(1, 10_000)]),
            )
            assert decode_frame(encode_frame(frame)) == frame

    def test_unknown_type(self):
        with pytest.raises(BadRequest) as exc:
            decode_frame('{"type":"gossip","id":"1","body":{}}')
        assert exc.value.code == "UNKNOWN_TYPE"

    def test_malformed_json(self):
        with pytest.raises(BadRequest):
            decode_frame('{"type":')

    def test_non_finite_rejected(self):
        with pytest.raises(BadRequest):
            decode_frame('{"type":"status","id":"1","body":{"x":NaN}}')
        with pytest.raises(BadRequest):
            encode_frame(make_frame(FrameType.STATUS, {"x": float("inf")}))

    def test_extra_keys_rejected(self):
        with pytest.raises(BadRequest):
            decode_frame('{"type":"status","id":"1","body":{},"extra":1}')

    def test_bytes_input(self):
        assert decode_frame(b'{"type":"hello","id":"a","body":{}}\n').type == FrameType.HELLO

    def test_decode_frames_skips_blank_lines(self):
        text = encode_frame(make_frame("status", id="a")) + "\n" + encode_frame(make_frame("hello", id="b"))
        assert [f.id for f in decode_frames(text)] == ["a", "b"]


class TestElements:
    def test_element_body_key_order(self):
        e = StreamElement(sensor="noise", seq=41, timestamp=1760000000000, values=(-23.5,))
        assert encode_element(e) == '{"sensor":"noise","seq":41,"timestamp":1760000000000,"values":[-23.5]}'

    def test_element_size_is_wire_size(self):
        e = StreamElement(sensor="ü", seq=0, timestamp=0, values=(1.0,))
        assert element_size(e) == len(encode_element(e).encode("utf-8"))

    def test_float_shortest_form(self):
        e = StreamElement(sensor="s", seq=0, timestamp=0, values=(0.1,))
        assert json.loads(encode_element(e))["values"] == [0.1]

    def test_deliver_frame_carries_gap(self):
        e = StreamElement(sensor="s", seq=5, timestamp=0, values=(1.0,))
        frame = deliver_frame(e, "sub", gap=2)
        assert (frame.type, frame.id, frame.gap, frame.body["seq"]) == (FrameType.DELIVER, "sub", 2, 5)
        assert deliver_frame(e, "sub", gap=0).gap is None


class TestErrors:
    def test_error_frame_body(self):
        frame = error_frame(ConfigInvalid("bad", detail=[{"code": "X"}]), id="r1")
        assert frame.body == {"code": "CONFIG_INVALID", "message": "bad", "detail": [{"code": "X"}]}

    def test_http_status_table(self):
        assert http_status("SENSOR_UNKNOWN") == 404
        assert http_status("QUEUE_FULL") == 503
        assert http_status("SOMETHING_NEW") == 400


class TestStructuredText:
    def test_config_round_trip_randomized(self):
        rng = random.Random(99)
        for i in range(1000):
            sensors = tuple(
                sensor_cfg(
                    name=f"s{i}_{k}",
                    plugin=rng.choice(["sine", "random_walk", "constant"]),
                    params={"seed": rng.randint(0, 10**6), "step": rng.uniform(0, 1)},
                    history_size=rng.randint(-5, 10_000),
                    processors=tuple(
                        ProcessorSpec(name=rng.choice(["rms_db", "moving_average"]), params={"n": rng.randint(1, 9)})
                        for _ in range(rng.randint(0, 3))
                    ),
                    fields=tuple(f"f{j}" for j in range(rng.randint(0, 3))),
                    sampling_interval=rng.randint(1, 5000),
                )
                for k in range(rng.randint(0, 3))
            )
            cfg = NodeConfig(node_id=f"node{i}", coordinator=rng.choice([None, "127.0.0.1:9100"]), sensors=sensors)
            assert loads_text(dumps_text(cfg), NodeConfig) == cfg

    def test_invalid_config_still_loads(self):
        text = dumps_text(sensor_cfg(history_size=0))
        assert loads_text(text, VirtualSensorConfig).history_size == 0

    def test_structural_error(self):
        with pytest.raises(BadRequest):
            loads_text('{"name": "x"}', VirtualSensorConfig)
