"""
Opsense — Experiment topology
What a benchmark run looks like: client nodes with their sensors, one
aggregator, the delivery mode and the load shape.
"""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

from ..models import FieldSchema, NodeConfig, SourceSpec, VirtualSensorConfig

HarnessMode = Literal["persistent_stream", "push", "pull"]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ClientSpec(_Frozen):
    node_id: str
    sensors: tuple[VirtualSensorConfig, ...] = Field(..., min_length=1)


class TopologySpec(_Frozen):
    """
    `requests_per_client` request streams are opened against every client;
    stream i targets sensor i % len(sensors), so 30 streams over 13 sensors
    repeat 17 sensors as extra views.
    """

    clients: tuple[ClientSpec, ...] = Field(..., min_length=1)
    aggregator: NodeConfig = NodeConfig(node_id="aggregator", listen="127.0.0.1:0")
    mode: HarnessMode = "pull"
    requests_per_client: int = Field(..., ge=1)
    duration: float = Field(..., ge=10)
    sampling_interval: int = Field(1000, ge=10)
    seed: int = 0
    host: str = "127.0.0.1"
    constrained_ops_per_s: float | None = Field(None, gt=0)


class StreamTarget(_Frozen):
    stream: str
    client: str
    sensor: str


class ClientEndpoint(_Frozen):
    node_id: str
    address: str


class RunPlan(_Frozen):
    """Everything the aggregator process needs, written by the runner."""

    spec: TopologySpec
    aggregator_listen: str
    clients: tuple[ClientEndpoint, ...]
    log_path: str
    registration_timeout: float = 30.0


def seeded_sensor(name: str, seed: int, history_size: int, sampling_interval: int) -> VirtualSensorConfig:
    return VirtualSensorConfig(
        name=name,
        source=SourceSpec(plugin="random_walk", params={"seed": seed}),
        output_schema=(FieldSchema(name="value"),),
        history_size=history_size,
        sampling_interval=sampling_interval,
    )


def default_topology(
    clients: int = 3,
    sensors_per_client: int = 13,
    requests_per_client: int = 30,
    mode: HarnessMode = "pull",
    duration: float = 60,
    sampling_interval: int = 1000,
    history_size: int = 60,
    seed: int = 0,
) -> TopologySpec:
    """Desk-scale testbed: N clients with seeded random-walk sensors, one aggregator."""
    client_specs = []
    for c in range(clients):
        sensors = tuple(
            seeded_sensor(f"s{s:02d}", seed * 10_000 + c * 100 + s, history_size, sampling_interval)
            for s in range(sensors_per_client)
        )
        client_specs.append(ClientSpec(node_id=f"client{c}", sensors=sensors))
    return TopologySpec(
        clients=tuple(client_specs),
        mode=mode,
        requests_per_client=requests_per_client,
        duration=duration,
        sampling_interval=sampling_interval,
        seed=seed,
    )


def stream_targets(spec: TopologySpec) -> list[StreamTarget]:
    targets = []
    for client in spec.clients:
        names = [s.name for s in client.sensors]
        for i in range(spec.requests_per_client):
            targets.append(
                StreamTarget(stream=f"{client.node_id}/r{i:02d}", client=client.node_id, sensor=names[i % len(names)])
            )
    return targets


def client_config(client: ClientSpec, spec: TopologySpec, listen: str, coordinator: str) -> NodeConfig:
    """Client node config; the topology's sampling interval applies to every sensor."""
    sensors = tuple(s.model_copy(update={"sampling_interval": spec.sampling_interval}) for s in client.sensors)
    return NodeConfig(node_id=client.node_id, listen=listen, coordinator=coordinator, sensors=sensors)
