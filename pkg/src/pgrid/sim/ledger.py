"""Synthetic task ledger: which node runs which task, and the utilization that implies."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from ..balancer import MigrationDecision, MigrationOutcome, TaskInfo
from ..model import Endpoint, LoadClass, LoadSample, LoadThresholds, classify_load


@dataclass
class TaskRecord:
    task_id: str
    node: Endpoint
    cpu: float
    ram: float
    ends_at: float


class Ledger:
    """Utilization of a node is ``min(1, base + sum of its task shares)`` per resource."""

    def __init__(self, base: dict[Endpoint, tuple[float, float]]):
        self.base = dict(base)
        self.tasks: dict[str, TaskRecord] = {}
        self.by_node: dict[Endpoint, dict[str, TaskRecord]] = {ep: {} for ep in base}
        self.arrived = [Fraction(0), Fraction(0)]
        self.completed = [Fraction(0), Fraction(0)]

    def add(self, rec: TaskRecord):
        if rec.task_id in self.tasks:
            raise ValueError(f"duplicate task {rec.task_id}")
        self.tasks[rec.task_id] = rec
        self.by_node[rec.node][rec.task_id] = rec
        self.arrived[0] += Fraction(rec.cpu)
        self.arrived[1] += Fraction(rec.ram)

    def finish(self, task_id: str) -> TaskRecord | None:
        rec = self.tasks.pop(task_id, None)
        if rec is not None:
            del self.by_node[rec.node][task_id]
            self.completed[0] += Fraction(rec.cpu)
            self.completed[1] += Fraction(rec.ram)
        return rec

    def move(self, task_id: str, target: Endpoint):
        rec = self.tasks[task_id]
        del self.by_node[rec.node][task_id]
        rec.node = target
        self.by_node[target][task_id] = rec

    def util(self, ep: Endpoint) -> tuple[float, float]:
        cpu, ram = self.base[ep]
        for rec in self.by_node[ep].values():
            cpu += rec.cpu
            ram += rec.ram
        return min(1.0, cpu), min(1.0, ram)

    def sample(self, ep: Endpoint, now: float) -> LoadSample:
        cpu, ram = self.util(ep)
        return LoadSample(cpu, ram, now)

    def task_infos(self, ep: Endpoint) -> list[TaskInfo]:
        return [TaskInfo(r.task_id, r.cpu, r.ram) for r in self.by_node[ep].values()]

    def outstanding(self) -> tuple[Fraction, Fraction]:
        """Exact total demand of all tasks currently placed anywhere."""
        cpu = sum((Fraction(r.cpu) for r in self.tasks.values()), Fraction(0))
        ram = sum((Fraction(r.ram) for r in self.tasks.values()), Fraction(0))
        return cpu, ram

    def conserved(self) -> bool:
        expected = (self.arrived[0] - self.completed[0], self.arrived[1] - self.completed[1])
        return self.outstanding() == expected


class SimProbe:
    """A node's view of its own load, read from the ledger."""

    def __init__(self, ledger: Ledger, ep: Endpoint):
        self.ledger = ledger
        self.ep = ep

    def sample(self, now: float) -> LoadSample:
        return self.ledger.sample(self.ep, now)

    def tasks(self) -> list[TaskInfo]:
        return self.ledger.task_infos(self.ep)


class LedgerExecutor:
    """Moves a task between ledger entries; the target refuses if it would end up overloaded."""

    def __init__(self, ledger: Ledger, online, thresholds_of):
        self.ledger = ledger
        self.online = online
        self.thresholds_of = thresholds_of

    def execute(self, decision: MigrationDecision) -> MigrationOutcome:
        rec = self.ledger.tasks.get(decision.task_id)
        if rec is None or rec.node != decision.source:
            return MigrationOutcome.SKIPPED
        target = decision.target
        if target not in self.ledger.base or not self.online(target):
            return MigrationOutcome.REFUSED
        cpu, ram = self.ledger.util(target)
        after = LoadSample(min(1.0, cpu + rec.cpu), min(1.0, ram + rec.ram))
        t: LoadThresholds = self.thresholds_of(target)
        if classify_load(after, t) is LoadClass.OVERLOADED:
            return MigrationOutcome.REFUSED
        self.ledger.move(decision.task_id, target)
        return MigrationOutcome.MIGRATED
