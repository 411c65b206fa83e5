"""Overload handling: pick a task, pick a target, hand the move to an executor.

Targets come from the local under-loaded list first.  Only when that pool is
empty does the node ask its group leader for under-loaded nodes of other
domains.  Moving the task is the executor's job; the node only decides.
"""

from __future__ import annotations

import enum
import logging
import os
import subprocess
from dataclasses import dataclass
from typing import TYPE_CHECKING, Protocol, Sequence

from .effects import Decided, Effect, Note, Send, StartTimer, StopTimer
from .model import Endpoint, LoadClass, LoadSample, UnderLoadedLocalList, classify_load
from .protocol import ExtUnderloadedQuery, ExtUnderloadedReply

if TYPE_CHECKING:
    from .node import Node

log = logging.getLogger(__name__)

NOT_LEADER = "notleader"


@dataclass(frozen=True)
class TaskInfo:
    task_id: str
    cpu: float
    ram: float

    @property
    def weight(self) -> float:
        return self.cpu + self.ram


class Tier(enum.Enum):
    LOCAL = "LOCAL"
    EXTERNAL = "EXTERNAL"


@dataclass(frozen=True)
class MigrationDecision:
    task_id: str
    source: Endpoint
    target: Endpoint
    tier: Tier
    decided_at: float
    cpu: float = 0.0
    ram: float = 0.0

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError("migration target equals source")


class MigrationOutcome(enum.Enum):
    MIGRATED = "migrated"
    REFUSED = "refused"
    FAILED = "failed"
    SKIPPED = "skipped"


class MigrationExecutor(Protocol):
    def execute(self, decision: MigrationDecision) -> MigrationOutcome: ...


class NoopExecutor:
    """Logs the decision and moves nothing."""

    def execute(self, decision: MigrationDecision) -> MigrationOutcome:
        log.debug("migration skipped: %s -> %s", decision.task_id, decision.target)
        return MigrationOutcome.SKIPPED


class CommandExecutor:
    """Runs an external command with the target and task in its environment; exit 0 means migrated."""

    def __init__(self, command: Sequence[str] | str, timeout: float = 60.0):
        self.command = command
        self.timeout = timeout

    def execute(self, decision: MigrationDecision) -> MigrationOutcome:
        env = dict(os.environ,
                   TARGET_ADDR=decision.target.address,
                   TARGET_PORT=str(decision.target.port),
                   TASK_ID=decision.task_id)
        proc = subprocess.run(self.command, env=env, shell=isinstance(self.command, str),
                              timeout=self.timeout, capture_output=True)
        return MigrationOutcome.MIGRATED if proc.returncode == 0 else MigrationOutcome.FAILED


def execute_migration(decision: MigrationDecision, executor: MigrationExecutor) -> MigrationOutcome:
    try:
        return executor.execute(decision)
    except Exception:  # an executor crash must not take the node down
        log.exception("migration executor failed for %s", decision.task_id)
        return MigrationOutcome.FAILED


def demand_shape(cpu: float, ram: float) -> str:
    """``cpu`` or ``ram`` when one resource is at least twice the other, else ``both``."""
    if cpu >= 2 * ram and cpu > 0:
        return "cpu"
    if ram >= 2 * cpu and ram > 0:
        return "ram"
    return "both"


def candidate_pool(under: UnderLoadedLocalList, cpu: float, ram: float) -> frozenset[Endpoint]:
    shape = demand_shape(cpu, ram)
    if shape == "cpu":
        return under.section_both | under.section_cpu
    if shape == "ram":
        return under.section_both | under.section_ram
    return under.section_both


def pick_task(tasks: Sequence[TaskInfo]) -> TaskInfo | None:
    """Heaviest task by cpu+ram; ties go to the smallest id."""
    if not tasks:
        return None
    return min(tasks, key=lambda t: (-t.weight, t.task_id))


@dataclass
class ExtEpisode:
    task: TaskInfo
    started_at: float


class BalancerDuties:
    """Mixed into :class:`pgrid.node.Node`."""

    def _init_balancer(self: Node):
        self.ext_episode: ExtEpisode | None = None

    def select_local_target(self: Node, cpu: float, ram: float) -> Endpoint | None:
        pool = sorted(candidate_pool(self.under_local, cpu, ram) - {self.ep})
        return self.rng.choice(pool) if pool else None

    def _decide(self: Node, task: TaskInfo, target: Endpoint, tier: Tier, now: float) -> Decided:
        return Decided(MigrationDecision(task.task_id, self.ep, target, tier, now, task.cpu, task.ram))

    def on_balance_tick(self: Node, sample: LoadSample, tasks: Sequence[TaskInfo], now: float) -> list[Effect]:
        if classify_load(sample, self.config.thresholds) is not LoadClass.OVERLOADED:
            return []
        if self.ext_episode is not None:
            return []
        task = pick_task(tasks)
        if task is None:
            return []
        target = self.select_local_target(task.cpu, task.ram)
        if target is not None:
            return [self._decide(task, target, Tier.LOCAL, now)]
        if self.is_leader:
            nodes = self._sample_external()
            if not nodes:
                return []
            return [self._decide(task, self.rng.choice(sorted(nodes)), Tier.EXTERNAL, now)]
        if self.leader_claim is None:
            return [Note("balance_deferred", {"reason": "no_leader"})]
        self.ext_episode = ExtEpisode(task, now)
        return [Send(self.leader_claim.leader, ExtUnderloadedQuery(self.ep)),
                StartTimer("ext_wait", self.config.ext_query_timeout)]

    def _sample_external(self: Node) -> tuple[Endpoint, ...]:
        table = self.tables.external_under_loaded_list
        pool = [ep for d in sorted(table) for ep in sorted(table[d])]
        return tuple(self.rng.sample(pool, min(self.config.reply_sample_size, len(pool))))

    def gl_handle_ext_underloaded_query(self: Node, m: ExtUnderloadedQuery, now: float) -> list[Effect]:
        if not self.is_leader:
            self.counters["not_leader"] += 1
            return [Send(m.sender, ExtUnderloadedReply((), NOT_LEADER))]
        return [Send(m.sender, ExtUnderloadedReply(self._sample_external()))]

    def on_ext_underloaded_reply(self: Node, m: ExtUnderloadedReply, now: float) -> list[Effect]:
        episode = self.ext_episode
        if episode is None:
            self.counters["stale_ext_reply"] += 1
            return []
        self.ext_episode = None
        out: list[Effect] = [StopTimer("ext_wait")]
        nodes = sorted(set(m.nodes) - {self.ep})
        if nodes:
            out.append(self._decide(episode.task, self.rng.choice(nodes), Tier.EXTERNAL, now))
        if m.reason == NOT_LEADER:
            out += self.leader_gone(now)
        return out

    def on_ext_wait_timeout(self: Node, now: float) -> list[Effect]:
        if self.ext_episode is None:
            return []
        self.ext_episode = None
        return [Note("balance_deferred", {"reason": "timeout"}), *self.probe_leader()]
