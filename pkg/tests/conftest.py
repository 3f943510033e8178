import json
from pathlib import Path

import pytest

from opsense import config
from opsense.models import FieldSchema, NodeConfig, ProcessorSpec, SourceSpec, VirtualSensorConfig
from opsense.node.engine import Node
from opsense.sources import PluginRegistry

EPOCH = 1_760_000_000_000


class FakeClock:
    """Settable millisecond clock for nodes driven by tick()."""

    def __init__(self, start: int = EPOCH):
        self.now = start

    def __call__(self) -> int:
        return self.now

    def advance(self, ms: int) -> int:
        self.now += ms
        return self.now


def sensor_cfg(
    name: str = "walk",
    plugin: str = "random_walk",
    params: dict | None = None,
    history_size: int = 10,
    processors: tuple[ProcessorSpec, ...] = (),
    fields: tuple[str, ...] = ("value",),
    sampling_interval: int = 1000,
) -> VirtualSensorConfig:
    return VirtualSensorConfig(
        name=name,
        source=SourceSpec(plugin=plugin, params=params if params is not None else {"seed": 7}),
        processors=processors,
        output_schema=tuple(FieldSchema(name=f) for f in fields),
        history_size=history_size,
        sampling_interval=sampling_interval,
    )


@pytest.fixture(scope="session")
def registry() -> PluginRegistry:
    reg = PluginRegistry(config.BUILTIN_PLUGIN_DIR)
    reg.discover()
    return reg


@pytest.fixture
def plugin_dir(tmp_path: Path) -> Path:
    """Scratch plugin directory: one good descriptor plus a CSV for replay."""
    d = tmp_path / "plugins"
    d.mkdir()
    (d / "level.plugin").write_text(
        json.dumps(
            {
                "plugin_name": "level",
                "description": "fixture",
                "fields": [{"name": "value"}],
                "parameters": [{"name": "value", "type": "number", "required": True}],
                "driver": "constant",
            }
        ),
        encoding="utf-8",
    )
    return d


@pytest.fixture
def clock() -> FakeClock:
    return FakeClock()


@pytest.fixture
def make_node(registry, clock):
    """Factory for in-process nodes sharing the packaged plugin registry."""

    def _make(
        *sensors: VirtualSensorConfig,
        node_id: str = "n1",
        peer_client_factory=None,
        push_client_factory=None,
        **cfg_fields,
    ) -> Node:
        cfg = NodeConfig(node_id=node_id, listen="127.0.0.1:0", sensors=sensors, **cfg_fields)
        extra = {"peer_client_factory": peer_client_factory} if peer_client_factory else {}
        return Node(cfg, registry=registry, clock=clock, push_client_factory=push_client_factory, **extra)

    return _make
