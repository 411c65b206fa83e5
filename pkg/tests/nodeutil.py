"""Small helpers for driving nodes by hand."""

from pgrid.effects import Send, StartTimer
from pgrid.model import Endpoint, LoadSample, MembershipTables, NodeInfo
from pgrid.node import Node, NodeConfig


def ep(i: int, port: int = 7401) -> Endpoint:
    return Endpoint(f"10.0.0.{i}", port)


def make_node(me, domain="D1", members=(), external=None, score=1.0, services=(), seed=0, probe=None, **cfg):
    tables = MembershipTables(me, domain, set(members), {d: set(e) for d, e in (external or {}).items()})
    return Node(NodeInfo(me, domain, score), tables, services, NodeConfig(**cfg), seed=seed, probe=probe)


def sends(effects, kind=None):
    return [e for e in effects if isinstance(e, Send) and (kind is None or isinstance(e.message, kind))]


def timers(effects):
    return {e.name: e.delay for e in effects if isinstance(e, StartTimer)}


def make_leader(node, now=0.0):
    node.start_election(now)
    return node._become_leader(now)


class FixedProbe:
    def __init__(self, cpu, ram, tasks=()):
        self.cpu, self.ram, self._tasks = cpu, ram, list(tasks)

    def sample(self, now):
        return LoadSample(self.cpu, self.ram, now)

    def tasks(self):
        return list(self._tasks)
