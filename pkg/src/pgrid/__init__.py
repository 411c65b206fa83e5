"""Peer-to-peer grid middleware: domains, group leaders, service discovery and load balancing."""

from .model import Endpoint, LoadClass, LoadSample, LoadThresholds, NodeInfo, classify_load
from .node import Node, NodeConfig, Role

__all__ = [
    "Endpoint",
    "LoadClass",
    "LoadSample",
    "LoadThresholds",
    "Node",
    "NodeConfig",
    "NodeInfo",
    "Role",
    "classify_load",
]
