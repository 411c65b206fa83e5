"""Per-node protocol state machine.

A :class:`Node` owns all of its tables and is driven by exactly one event at a
time: ``on_start``, ``on_timer`` or ``on_message``.  Each call mutates the
node and returns a list of effects (sends, timer changes, decisions, notes)
for the host to apply.  Nothing here knows whether the host is the simulator
or a UDP socket.

Timers used (all re-armed by the node itself):

``status``        load classification and broadcast on change
``balance``       overload check and migration target selection
``services``      own-services announcement
``refresh``       leader: cross-domain leader discovery + heartbeat;
                  member: leader liveness check; everyone: under-loaded keepalive
``election``      self-election deadline
``leader_probe``  deadline for the leader to answer a liveness probe
``ext_wait``      deadline for external under-loaded candidates
``lookup:<qid>``  / ``relay:<qid>`` service query deadlines
"""

from __future__ import annotations

import enum
import random
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Protocol

from .balancer import BalancerDuties, TaskInfo
from .discovery import DiscoveryDuties
from .effects import Effect, Note, Send, StartTimer, StopTimer
from .model import (
    Endpoint,
    LoadClass,
    LoadSample,
    LoadThresholds,
    MembershipTables,
    NodeInfo,
    ServiceTables,
    UnderLoadedLocalList,
    apply_load_status,
    classify_load,
    expire_stale,
    merge_service_announcement,
)
from .protocol import (
    ExtUnderloadedQuery,
    ExtUnderloadedReply,
    GlOfDomainQuery,
    GlOfDomainReply,
    GlQuery,
    GlReply,
    LoadStatus,
    MemberNotice,
    Message,
    OwnServices,
    ServiceFwd,
    ServiceQuery,
    ServiceReply,
    UnderloadedGossip,
)


class Role(enum.Enum):
    MEMBER = "MEMBER"
    LEADER = "LEADER"


@dataclass(frozen=True)
class Claim:
    """A leadership claim; claims are totally ordered to settle split elections."""

    epoch: int
    score: float
    leader: Endpoint

    def beats(self, other: Claim) -> bool:
        if (self.epoch, self.score) != (other.epoch, other.score):
            return (self.epoch, self.score) > (other.epoch, other.score)
        return self.leader < other.leader

    def reply(self, domain: str) -> GlReply:
        return GlReply(self.leader, domain, self.epoch, self.score)


@dataclass
class NodeConfig:
    status_period: float = 1.0
    balance_period: float = 3.0
    gl_refresh_period: float = 100.0
    gl_election_timeout: float = 5.0
    gossip_fanout_k: int = 3
    reply_sample_size: int = 3
    services_period_multiplier: int = 5
    query_timeout: float = 10.0
    ext_query_timeout: float = 5.0
    thresholds: LoadThresholds = field(default_factory=LoadThresholds)
    ttl: float | None = None
    balancing: bool = True

    def __post_init__(self):
        if isinstance(self.thresholds, dict):
            self.thresholds = LoadThresholds(**self.thresholds)
        if self.ttl is None:
            # entries are refreshed by the keepalive on every refresh tick
            self.ttl = 3 * self.gl_refresh_period
        periods = ("status_period", "balance_period", "gl_refresh_period", "gl_election_timeout",
                   "query_timeout", "ext_query_timeout", "ttl")
        for name in periods:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.gossip_fanout_k < 1 or self.reply_sample_size < 1 or self.services_period_multiplier < 1:
            raise ValueError("gossip_fanout_k, reply_sample_size and services_period_multiplier must be >= 1")

    @property
    def services_period(self) -> float:
        return self.status_period * self.services_period_multiplier

    @property
    def settle_delay(self) -> float:
        """Delay of the first cross-domain refresh after becoming leader."""
        return 2 * self.gl_election_timeout

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> NodeConfig:
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown node config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class LoadProbe(Protocol):
    def sample(self, now: float) -> LoadSample: ...

    def tasks(self) -> list[TaskInfo]: ...


class IdleProbe:
    def sample(self, now: float) -> LoadSample:
        return LoadSample(0.0, 0.0, now)

    def tasks(self) -> list[TaskInfo]:
        return []


class Node(DiscoveryDuties, BalancerDuties):
    def __init__(
        self,
        info: NodeInfo,
        tables: MembershipTables,
        own_services=(),
        config: NodeConfig | None = None,
        seed: Any = 0,
        probe: LoadProbe | None = None,
    ):
        if tables.own != info.endpoint or tables.domain != info.domain:
            raise ValueError("tables belong to a different node")
        self.info = info
        self.ep = info.endpoint
        self.domain = info.domain
        self.config = config or NodeConfig()
        self.tables = tables
        self.own_services = frozenset(own_services)
        self.rng = random.Random(seed)
        self.probe: LoadProbe = probe or IdleProbe()
        self.counters: Counter[str] = Counter()
        self.epoch_floor = 0
        self._reset_volatile()

    def _reset_volatile(self):
        self.role = Role.MEMBER
        self.epoch = 0
        self.leader_claim: Claim | None = None
        self.suspected: Claim | None = None
        self.electing = False
        self.probing = False
        self.heard_leader = False
        self.under_local = UnderLoadedLocalList()
        self.services = merge_service_announcement(ServiceTables(self.own_services), self.ep, self.own_services)
        self.last_class = LoadClass.NORMAL
        self.last_sample = LoadSample(0.0, 0.0)
        self.tables.other_group_leader_list.clear()
        self.tables.external_under_loaded_list.clear()
        self.gl_epochs: dict[str, int] = {}
        self._gossiped: frozenset[Endpoint] = frozenset()
        self._init_discovery()
        self._init_balancer()

    def restart(self):
        """Forget everything volatile, as a rebooted process would; epochs survive."""
        self._reset_volatile()

    # -- views ---------------------------------------------------------------

    @property
    def is_leader(self) -> bool:
        return self.role is Role.LEADER

    @property
    def my_leader(self) -> Endpoint | None:
        return self.leader_claim.leader if self.leader_claim else None

    @property
    def locals(self) -> list[Endpoint]:
        return sorted(self.tables.local_domain_members)

    def my_claim(self) -> Claim:
        return Claim(self.epoch, round(self.info.capacity_score, 2), self.ep)

    def _to_locals(self, msg: Message) -> list[Effect]:
        return [Send(ep, msg) for ep in self.locals]

    # -- entry points ----------------------------------------------------------

    def on_start(self, now: float) -> list[Effect]:
        cfg = self.config
        out: list[Effect] = [
            StartTimer("status", cfg.status_period),
            StartTimer("services", cfg.services_period),
            StartTimer("refresh", cfg.gl_refresh_period),
        ]
        if cfg.balancing:
            out.append(StartTimer("balance", cfg.balance_period))
        out += self.start_election(now)
        return out

    def on_timer(self, name: str, now: float) -> list[Effect]:
        cfg = self.config
        if name == "status":
            return [StartTimer("status", cfg.status_period), *self.on_status_tick(self.probe.sample(now), now)]
        if name == "balance":
            return [StartTimer("balance", cfg.balance_period),
                    *self.on_balance_tick(self.probe.sample(now), self.probe.tasks(), now)]
        if name == "services":
            return [StartTimer("services", cfg.services_period), *self.on_services_tick(now)]
        if name == "refresh":
            return [StartTimer("refresh", cfg.gl_refresh_period), *self.on_gl_refresh_tick(now)]
        if name == "election":
            return self.on_election_timeout(now)
        if name == "leader_probe":
            return self.on_leader_probe_timeout(now)
        if name == "ext_wait":
            return self.on_ext_wait_timeout(now)
        kind, _, qid = name.partition(":")
        if kind == "lookup":
            return self.on_lookup_timeout(int(qid), now)
        if kind == "relay":
            self.relays.pop(int(qid), None)
            return []
        raise ValueError(f"unknown timer {name!r}")

    def on_message(self, m: Message, now: float) -> list[Effect]:
        handler = _DISPATCH.get(type(m))
        if handler is None:
            self.counters["unexpected_type"] += 1
            return []
        return handler(self, m, now)

    # -- leader election ---------------------------------------------------------

    def start_election(self, now: float) -> list[Effect]:
        self.electing = True
        if not self.tables.local_domain_members:
            return self._become_leader(now)
        return [*self._to_locals(GlQuery(self.ep)), StartTimer("election", self.config.gl_election_timeout)]

    def on_election_timeout(self, now: float) -> list[Effect]:
        if not self.electing or self.leader_claim is not None:
            return []
        return self._become_leader(now)

    def _become_leader(self, now: float) -> list[Effect]:
        self.epoch = self.epoch_floor + 1
        self.epoch_floor = self.epoch
        self.role = Role.LEADER
        self.leader_claim = self.my_claim()
        self.electing = self.probing = False
        self.suspected = None
        self._gossiped = self._gossip_pool()
        out: list[Effect] = [
            StopTimer("election"),
            StopTimer("leader_probe"),
            Note("elected", {"epoch": self.epoch}),
        ]
        out += self._to_locals(self.leader_claim.reply(self.domain))
        out += [Send(ep, GlOfDomainQuery(self.ep)) for ep in self.tables.external_endpoints()]
        out.append(StartTimer("refresh", self.config.settle_delay))
        return out

    def resolve_leader_conflict(self, claim: Claim, now: float) -> list[Effect]:
        """Two leaders in one domain: the higher (epoch, score, smaller endpoint) keeps the role."""
        mine = self.my_claim()
        if not claim.beats(mine):
            # tell the loser directly instead of waiting for the next heartbeat
            return [Send(claim.leader, mine.reply(self.domain))]
        self.role = Role.MEMBER
        self.epoch = 0
        self.tables.other_group_leader_list.clear()
        self.tables.external_under_loaded_list.clear()
        self.gl_epochs.clear()
        return [Note("abdicated", {"to": str(claim.leader), "epoch": claim.epoch}), *self._adopt(claim)]

    def _adopt(self, claim: Claim) -> list[Effect]:
        changed = self.leader_claim is None or self.leader_claim.leader != claim.leader
        self.leader_claim = claim
        self.epoch_floor = max(self.epoch_floor, claim.epoch)
        self.suspected = None
        self.heard_leader = True
        out: list[Effect] = []
        if self.electing:
            self.electing = False
            out.append(StopTimer("election"))
        if self.probing:
            self.probing = False
            out.append(StopTimer("leader_probe"))
        if changed:
            out.append(Note("leader", {"leader": str(claim.leader), "epoch": claim.epoch}))
        return out

    def on_gl_query(self, m: GlQuery, now: float) -> list[Effect]:
        if m.sender == self.ep:
            return []
        # only the leader answers: every claim a node hears is first-hand
        if self.is_leader:
            return [Send(m.sender, self.my_claim().reply(self.domain))]
        return []

    def on_gl_reply(self, m: GlReply, now: float) -> list[Effect]:
        if m.domain != self.domain:
            self.counters["foreign_gl_reply"] += 1
            return []
        if m.leader == self.ep:
            return []
        claim = Claim(m.epoch, m.score, m.leader)
        if self.is_leader:
            return self.resolve_leader_conflict(claim, now)
        if self.suspected and claim.leader == self.suspected.leader and claim.epoch <= self.suspected.epoch:
            return []
        if claim.epoch < self.epoch_floor:
            return []
        cur = self.leader_claim
        if cur is None or claim.beats(cur) or (claim.leader == cur.leader and claim.epoch >= cur.epoch):
            return self._adopt(claim)
        return []

    def on_leader_probe_timeout(self, now: float) -> list[Effect]:
        if not self.probing or self.is_leader:
            return []
        self.probing = False
        lost = self.leader_claim
        self.suspected = lost
        self.leader_claim = None
        out: list[Effect] = [Note("leader_lost", {"leader": str(lost.leader) if lost else "-"})]
        return out + self.start_election(now)

    def probe_leader(self) -> list[Effect]:
        """Ask the current leader whether it is still alive."""
        if self.is_leader or self.leader_claim is None or self.probing:
            return []
        self.probing = True
        return [Send(self.leader_claim.leader, GlQuery(self.ep)),
                StartTimer("leader_probe", self.config.gl_election_timeout)]

    def leader_gone(self, now: float) -> list[Effect]:
        """The believed leader said it is not leader: forget it and re-elect."""
        if self.is_leader or self.electing:
            return []
        self.leader_claim = None
        self.probing = False
        return [StopTimer("leader_probe"), Note("leader_lost", {"leader": "-"}), *self.start_election(now)]

    # -- periodic duties -------------------------------------------------------------

    def on_status_tick(self, sample: LoadSample, now: float) -> list[Effect]:
        self.last_sample = sample
        self.under_local = expire_stale(self.under_local, now, self.config.ttl)
        cls = classify_load(sample, self.config.thresholds)
        out: list[Effect] = []
        if cls is not self.last_class:
            out.append(Note("load_class", {"from": self.last_class.value, "to": cls.value}))
            self.last_class = cls
            out += self._to_locals(LoadStatus(self.ep, sample.cpu_util, sample.ram_util, cls))
        return out + self._maybe_gossip()

    def on_gl_refresh_tick(self, now: float) -> list[Effect]:
        out: list[Effect] = []
        if self.is_leader:
            out += [Send(ep, GlOfDomainQuery(self.ep)) for ep in self.tables.external_endpoints()]
            out += self._to_locals(self.my_claim().reply(self.domain))
        elif self.leader_claim is not None:
            if not self.heard_leader:
                out += self.probe_leader()
            self.heard_leader = False
        elif not self.electing:
            out += self.start_election(now)
        if self.last_class.is_under:
            s = self.last_sample
            out += self._to_locals(LoadStatus(self.ep, s.cpu_util, s.ram_util, self.last_class))
        return out

    # -- load tables and gossip ------------------------------------------------------------

    def on_load_status(self, m: LoadStatus, now: float) -> list[Effect]:
        if m.sender not in self.tables.local_domain_members:
            self.counters["unknown_sender"] += 1
            return []
        self.under_local = apply_load_status(self.under_local, m.sender, m.load_class, now)
        return self._maybe_gossip()

    def _gossip_pool(self) -> frozenset[Endpoint]:
        pool = set(self.under_local.members())
        if self.last_class.is_under:
            pool.add(self.ep)
        return frozenset(pool)

    def _gossip_sample(self) -> tuple[Endpoint, ...]:
        pool = sorted(self._gossip_pool())
        return tuple(self.rng.sample(pool, min(self.config.gossip_fanout_k, len(pool))))

    def _maybe_gossip(self) -> list[Effect]:
        if not self.is_leader:
            return []
        pool = self._gossip_pool()
        if pool == self._gossiped:
            return []
        self._gossiped = pool
        gls = self.tables.other_group_leader_list
        if not gls:
            return []
        msg = UnderloadedGossip(self.domain, self._gossip_sample())
        return [Send(gls[d], msg) for d in sorted(gls)]

    def on_underloaded_gossip(self, m: UnderloadedGossip, now: float) -> list[Effect]:
        if not self.is_leader:
            self.counters["not_leader"] += 1
            return []
        if m.domain == self.domain:
            return []
        table = self.tables.external_under_loaded_list
        if m.nodes:
            table[m.domain] = frozenset(m.nodes)
        else:
            table.pop(m.domain, None)
        return []

    # -- cross-domain leader table ----------------------------------------------------------

    def on_gl_of_domain_query(self, m: GlOfDomainQuery, now: float) -> list[Effect]:
        claim = self.my_claim() if self.is_leader else self.leader_claim
        if claim is None:
            return []
        return [Send(m.sender, GlOfDomainReply(self.domain, claim.leader, claim.epoch))]

    def on_gl_of_domain_reply(self, m: GlOfDomainReply, now: float) -> list[Effect]:
        if not self.is_leader:
            self.counters["not_leader"] += 1
            return []
        if m.domain == self.domain:
            return []
        gls = self.tables.other_group_leader_list
        if m.epoch < self.gl_epochs.get(m.domain, 0):
            return []
        previous = gls.get(m.domain)
        gls[m.domain] = m.leader
        self.gl_epochs[m.domain] = m.epoch
        if previous == m.leader or not self._gossip_pool():
            return []
        # a leader we did not know yet gets our current under-loaded snapshot
        return [Send(m.leader, UnderloadedGossip(self.domain, self._gossip_sample()))]

    def on_member_notice(self, m: MemberNotice, now: float) -> list[Effect]:
        if m.domain == self.domain:
            self.tables.add_member(m.node)
            return []
        if self.tables.add_external(m.domain, m.node) and self.is_leader:
            return [StartTimer("refresh", self.config.settle_delay)]
        return []


_DISPATCH = {
    LoadStatus: Node.on_load_status,
    GlQuery: Node.on_gl_query,
    GlReply: Node.on_gl_reply,
    GlOfDomainQuery: Node.on_gl_of_domain_query,
    GlOfDomainReply: Node.on_gl_of_domain_reply,
    UnderloadedGossip: Node.on_underloaded_gossip,
    ExtUnderloadedQuery: Node.gl_handle_ext_underloaded_query,
    ExtUnderloadedReply: Node.on_ext_underloaded_reply,
    OwnServices: Node.on_own_services,
    ServiceQuery: Node.gl_handle_service_query,
    ServiceFwd: Node.gl_handle_service_fwd,
    ServiceReply: Node.on_service_reply,
    MemberNotice: Node.on_member_notice,
}
