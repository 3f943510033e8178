"""Opsense — per-device node engine."""

from .engine import Node, load_node
from .runner import NodeRunner, start_node

__all__ = ["Node", "NodeRunner", "load_node", "start_node"]
