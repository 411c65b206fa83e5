"""Service resolution: own services, then the local domain, then the group leaders.

A node first answers from its own service list, then from the
domain-wide table it builds out of peer announcements.  Only when both miss
does it ask its group leader, which forwards the query to every other group
leader it knows and relays the first positive answer back.  Misses at a
foreign leader are silent; the origin's timeout turns silence into NotFound.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

from .effects import Effect, Resolved, Send, StartTimer, StopTimer
from .model import Endpoint, check_name, merge_service_announcement
from .protocol import OwnServices, Outcome, ServiceFwd, ServiceQuery, ServiceReply, fit_list

if TYPE_CHECKING:
    from .node import Node

NOT_LEADER = "notleader"
SERVICE_TTL_PERIODS = 3


@dataclass(frozen=True)
class Resolution:
    """Result of a lookup; ``outcome`` is None while the query is still in flight."""

    outcome: Outcome | None
    provider: Endpoint | None = None
    qid: int | None = None
    reason: str = ""

    @property
    def pending(self) -> bool:
        return self.outcome is None

    @property
    def found(self) -> bool:
        return self.outcome in (Outcome.LOCAL, Outcome.DOMAIN, Outcome.REMOTE)


@dataclass
class PendingQuery:
    qid: int
    origin: Endpoint
    service: str
    issued_at: float
    fanout_remaining: int = 0


class DiscoveryDuties:
    """Mixed into :class:`pgrid.node.Node`."""

    def _init_discovery(self: Node):
        self.next_qid = getattr(self, "next_qid", 1)
        self.lookups: dict[int, PendingQuery] = {}
        self.relays: dict[int, PendingQuery] = {}
        self.services_heard: dict[Endpoint, float] = {}

    def _new_qid(self: Node) -> int:
        qid = self.next_qid
        self.next_qid += 1
        return qid

    def _sample_providers(self: Node, providers) -> tuple[Endpoint, ...]:
        pool = sorted(providers)
        return tuple(self.rng.sample(pool, min(self.config.reply_sample_size, len(pool))))

    # -- origin side -------------------------------------------------------------

    def resolve_service(self: Node, service: str, now: float) -> tuple[Resolution, list[Effect]]:
        check_name(service, "service")
        if service in self.own_services:
            return Resolution(Outcome.LOCAL, self.ep), []
        local = sorted(self.services.providers(service) - {self.ep})
        if local:
            return Resolution(Outcome.DOMAIN, self.rng.choice(local)), []

        if self.is_leader:
            gls = self.tables.other_group_leader_list
            if not gls:
                return Resolution(Outcome.NOTFOUND, reason="no_provider"), []
            qid = self._new_qid()
            entry = PendingQuery(qid, self.ep, service, now, len(gls))
            self.lookups[qid] = entry
            self.relays[qid] = entry
            fwd = ServiceFwd(self.ep, self.ep, service, qid)
            out: list[Effect] = [Send(gls[d], fwd) for d in sorted(gls)]
            out.append(StartTimer(f"lookup:{qid}", self.config.query_timeout))
            return Resolution(None, qid=qid), out

        if self.leader_claim is None:
            return Resolution(Outcome.NOTFOUND, reason="no_leader"), []
        qid = self._new_qid()
        self.lookups[qid] = PendingQuery(qid, self.ep, service, now)
        return Resolution(None, qid=qid), [
            Send(self.leader_claim.leader, ServiceQuery(self.ep, service, qid)),
            StartTimer(f"lookup:{qid}", self.config.query_timeout),
        ]

    def _finish_lookup(self: Node, entry: PendingQuery, reply: ServiceReply, now: float) -> list[Effect]:
        out: list[Effect] = [StopTimer(f"lookup:{entry.qid}")]
        if reply.providers:
            res = Resolution(Outcome.REMOTE, self.rng.choice(sorted(reply.providers)), entry.qid)
        else:
            res = Resolution(Outcome.NOTFOUND, qid=entry.qid, reason=reply.reason or "no_provider")
        out.append(Resolved(entry.qid, res))
        if reply.reason == NOT_LEADER:
            out += self.leader_gone(now)
        return out

    def on_lookup_timeout(self: Node, qid: int, now: float) -> list[Effect]:
        entry = self.lookups.pop(qid, None)
        if entry is None:
            return []
        self.relays.pop(qid, None)
        out: list[Effect] = [Resolved(qid, Resolution(Outcome.NOTFOUND, qid=qid, reason="timeout"))]
        # a leader-bound request went unanswered: check the leader is still there
        return out + self.probe_leader()

    # -- leader side -------------------------------------------------------------

    def gl_handle_service_query(self: Node, m: ServiceQuery, now: float) -> list[Effect]:
        if not self.is_leader:
            self.counters["not_leader"] += 1
            return [Send(m.origin, ServiceReply(m.service, m.qid, (), NOT_LEADER))]
        providers = self.services.providers(m.service) - {m.origin}
        if providers:
            return [Send(m.origin, ServiceReply(m.service, m.qid, self._sample_providers(providers)))]
        gls = self.tables.other_group_leader_list
        if not gls:
            return [Send(m.origin, ServiceReply(m.service, m.qid, ()))]
        rid = self._new_qid()
        self.relays[rid] = PendingQuery(m.qid, m.origin, m.service, now, len(gls))
        fwd = ServiceFwd(m.origin, self.ep, m.service, rid)
        return [*(Send(gls[d], fwd) for d in sorted(gls)), StartTimer(f"relay:{rid}", self.config.query_timeout)]

    def gl_handle_service_fwd(self: Node, m: ServiceFwd, now: float) -> list[Effect]:
        if not self.is_leader:
            self.counters["not_leader"] += 1
            return []
        providers = self.services.providers(m.service)
        if not providers:
            return []
        return [Send(m.via_gl, ServiceReply(m.service, m.qid, self._sample_providers(providers)))]

    def on_service_reply(self: Node, m: ServiceReply, now: float) -> list[Effect]:
        relay = self.relays.get(m.qid)
        if relay is not None and relay.service == m.service:
            if not m.providers:
                relay.fanout_remaining -= 1
                return []
            del self.relays[m.qid]
            if relay.origin == self.ep:
                entry = self.lookups.pop(m.qid, None)
                return self._finish_lookup(entry, m, now) if entry else []
            return [StopTimer(f"relay:{m.qid}"), Send(relay.origin, ServiceReply(m.service, relay.qid, m.providers))]
        entry = self.lookups.get(m.qid)
        if entry is not None and entry.service == m.service and entry.origin == self.ep:
            del self.lookups[m.qid]
            return self._finish_lookup(entry, m, now)
        self.counters["unknown_qid"] += 1
        return []

    # -- announcements -----------------------------------------------------------

    def on_services_tick(self: Node, now: float) -> list[Effect]:
        # peers that stopped announcing are presumed gone along with their services
        horizon = SERVICE_TTL_PERIODS * self.config.services_period
        for ep in sorted(self.services_heard):
            if now - self.services_heard[ep] > horizon:
                del self.services_heard[ep]
                self.services = merge_service_announcement(self.services, ep, ())
        msg = fit_list(lambda items: OwnServices(self.ep, items), sorted(self.own_services))
        return self._to_locals(msg)

    def on_own_services(self: Node, m: OwnServices, now: float) -> list[Effect]:
        if m.sender not in self.tables.local_domain_members:
            self.counters["unknown_sender"] += 1
            return []
        self.services_heard[m.sender] = now
        self.services = merge_service_announcement(self.services, m.sender, m.services)
        return []
