"""
Opsense — Source tests
Descriptor discovery, parameter resolution and the built-in drivers.
"""

import json
import random

import pytest

from opsense.errors import DirectoryUnreadable, ParamError, PluginUnknown, SourceExhausted
from opsense.models import PluginDescriptor
from opsense.sources import PluginRegistry, discover_plugins, instantiate, list_drivers, resolve_params, sample
from opsense.wire import dumps_text, loads_text


class TestDiscovery:
    def test_packaged_plugins(self, registry):
        assert {"constant", "sine", "random_walk", "sine_audio", "replay", "multi_axis"} <= registry.names()

    def test_sorted_by_name(self, registry):
        names = [d.plugin_name for d in registry.descriptors()]
        assert names == sorted(names)

    def test_malformed_file_is_skipped_not_fatal(self, plugin_dir):
        (plugin_dir / "broken.plugin").write_text("{not json", encoding="utf-8")
        (plugin_dir / "notes.txt").write_text("ignored", encoding="utf-8")
        result = discover_plugins(plugin_dir)
        assert [d.plugin_name for d in result.descriptors] == ["level"]
        assert [d.file for d in result.diagnostics] == ["broken.plugin"]

    def test_file_name_must_match_plugin_name(self, plugin_dir):
        (plugin_dir / "other.plugin").write_text(
            json.dumps({"plugin_name": "mismatch", "fields": [{"name": "v"}]}), encoding="utf-8"
        )
        result = discover_plugins(plugin_dir)
        assert "other.plugin" in [d.file for d in result.diagnostics]

    def test_unreadable_directory(self, tmp_path):
        with pytest.raises(DirectoryUnreadable):
            discover_plugins(tmp_path / "missing")

    def test_rediscovery_picks_up_new_descriptor(self, plugin_dir):
        reg = PluginRegistry(plugin_dir)
        reg.discover()
        assert reg.names() == {"level"}
        (plugin_dir / "level2.plugin").write_text(
            json.dumps({"plugin_name": "level2", "fields": [{"name": "v"}], "driver": "constant",
                        "parameters": [{"name": "value", "type": "number", "default": 1.0}]}),
            encoding="utf-8",
        )
        assert reg.names() == {"level"}
        reg.discover()
        assert reg.names() == {"level", "level2"}

    def test_descriptor_survives_text_round_trip(self, registry, tmp_path):
        for descriptor in registry.descriptors():
            (tmp_path / f"{descriptor.plugin_name}.plugin").write_text(dumps_text(descriptor), encoding="utf-8")
            assert loads_text(dumps_text(descriptor), PluginDescriptor) == descriptor
        assert discover_plugins(tmp_path).descriptors == registry.descriptors()

    def test_unknown_plugin(self, registry):
        with pytest.raises(PluginUnknown):
            registry.get("thermometer")


class TestParams:
    def test_defaults_applied(self, registry):
        params = resolve_params(registry.get("random_walk"), {})
        assert params == {"step": 0.1, "seed": 0, "start": 0.0}

    def test_missing_required(self, registry):
        with pytest.raises(ParamError) as exc:
            resolve_params(registry.get("sine"), {})
        assert exc.value.code == "PARAM_MISSING"

    def test_type_mismatch(self, registry):
        with pytest.raises(ParamError) as exc:
            resolve_params(registry.get("sine"), {"freq_hz": "fast"})
        assert exc.value.code == "PARAM_TYPE_MISMATCH"

    def test_bool_is_not_a_number(self, registry):
        with pytest.raises(ParamError):
            resolve_params(registry.get("sine"), {"freq_hz": True})

    def test_unknown_param(self, registry):
        with pytest.raises(ParamError) as exc:
            resolve_params(registry.get("constant"), {"value": 1, "colour": "red"})
        assert exc.value.code == "PARAM_UNKNOWN"


class TestDrivers:
    def test_driver_bound_by_descriptor(self, plugin_dir):
        reg = PluginRegistry(plugin_dir)
        reg.discover()
        assert sample(reg.instantiate("level", {"value": 3}), 0) == [3.0]

    def test_builtin_drivers(self):
        assert "random_walk" in list_drivers()

    def test_frame_param_sets_arity(self, registry):
        inst = registry.instantiate("sine_audio", {"freq_hz": 440, "frame": 64})
        assert inst.arity == 64
        assert len(sample(inst, 0)) == 64

    def test_multi_axis_gravity_on_z(self, registry):
        inst = registry.instantiate("multi_axis", {"seed": 1, "scale": 0.0})
        assert sample(inst, 0) == [0.0, 0.0, 9.80665]

    def test_sine_starts_at_zero(self, registry):
        inst = registry.instantiate("sine", {"freq_hz": 1.0})
        assert sample(inst, 5_000) == [0.0]
        assert sample(inst, 5_250)[0] == pytest.approx(1.0)

    def test_replay_reads_rows_then_exhausts(self, registry, tmp_path):
        csv = tmp_path / "trace.csv"
        csv.write_text("value\n1.5\n2.5\n", encoding="utf-8")
        inst = registry.instantiate("replay", {"file": str(csv)})
        assert [sample(inst, 0), sample(inst, 1)] == [[1.5], [2.5]]
        with pytest.raises(SourceExhausted):
            sample(inst, 2)

    def test_replay_loop(self, registry, tmp_path):
        csv = tmp_path / "trace.csv"
        csv.write_text("value\n1\n2\n", encoding="utf-8")
        inst = registry.instantiate("replay", {"file": str(csv), "loop": True})
        assert [sample(inst, t)[0] for t in range(5)] == [1.0, 2.0, 1.0, 2.0, 1.0]

    def test_replay_missing_file(self, registry, tmp_path):
        with pytest.raises(ParamError):
            registry.instantiate("replay", {"file": str(tmp_path / "none.csv")})

    def test_replay_reads_ndjson(self, registry, tmp_path):
        trace = tmp_path / "trace.ndjson"
        trace.write_text('{"x": 1, "timestamp": 10}\n{"x": 2.5, "timestamp": 11}\n', encoding="utf-8")
        inst = registry.instantiate("replay", {"file": str(trace)})
        assert (inst.columns, inst.arity) == (["x", "timestamp"], 2)
        assert [sample(inst, 0), sample(inst, 1)] == [[1.0, 10.0], [2.5, 11.0]]
        with pytest.raises(SourceExhausted):
            sample(inst, 2)

    def test_replay_ndjson_missing_key(self, registry, tmp_path):
        trace = tmp_path / "trace.jsonl"
        trace.write_text('{"x": 1, "y": 2}\n{"x": 3}\n', encoding="utf-8")
        with pytest.raises(ParamError):
            registry.instantiate("replay", {"file": str(trace)})

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_builtins_keep_arity_under_random_params(self, registry, tmp_path, seed):
        rng = random.Random(seed)
        trace = tmp_path / "trace.csv"
        trace.write_text("a,b,c\n" + "1,2,3\n" * 10, encoding="utf-8")
        drawn = {
            "number": lambda: rng.uniform(0.01, 500.0),
            "integer": lambda: rng.randint(1, 512),
            "boolean": lambda: True,
            "string": lambda: str(trace),
        }
        for descriptor in registry.descriptors():
            params = {p.name: drawn[p.type]() for p in descriptor.parameters if p.required or rng.random() < 0.5}
            inst = instantiate(descriptor, params)
            for t in range(5):
                assert len(sample(inst, t * rng.randint(1, 1000))) == inst.arity


class TestSeededReproducibility:
    def test_same_seed_same_first_hundred(self, registry):
        a = registry.instantiate("random_walk", {"step": 0.1, "seed": 42})
        b = registry.instantiate("random_walk", {"step": 0.1, "seed": 42})
        assert [sample(a, t) for t in range(100)] == [sample(b, t) for t in range(100)]

    def test_randomized_seeds_reproduce(self, registry):
        rng = random.Random(1234)
        walk = registry.get("random_walk")
        axis = registry.get("multi_axis")
        for _ in range(1000):
            seed = rng.randrange(2**32)
            descriptor = walk if rng.random() < 0.5 else axis
            a = instantiate(descriptor, {"seed": seed})
            b = instantiate(descriptor, {"seed": seed})
            steps = rng.randint(1, 5)
            assert [sample(a, t) for t in range(steps)] == [sample(b, t) for t in range(steps)]

    def test_different_seeds_diverge(self, registry):
        a = registry.instantiate("random_walk", {"seed": 1})
        b = registry.instantiate("random_walk", {"seed": 2})
        assert [sample(a, t) for t in range(10)] != [sample(b, t) for t in range(10)]
