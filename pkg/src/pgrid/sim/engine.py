"""Deterministic discrete-event runner for a whole grid.

Events are ordered by ``(time, insertion sequence)``.  Every random draw of
the network (latency, drops) comes from one RNG seeded by the scenario; each
node has its own RNG seeded from the scenario seed and its endpoint.  Two
runs of the same scenario therefore produce byte-identical traces.

Each event carries a causal tag.  Timer and start events open a fresh tag,
lookups open ``L<index>``, and messages inherit the tag of the handler that
sent them, so the trace can attribute every message to the event that
caused it.
"""

from __future__ import annotations

import heapq
import json
import random
from collections import Counter
from dataclasses import dataclass
from statistics import pstdev
from typing import Any

from ..admin import Admin
from ..balancer import execute_migration
from ..discovery import Resolution
from ..effects import Decided, Note, Resolved, Send, StartTimer, StopTimer
from ..model import Endpoint, NodeInfo
from ..node import Node
from ..protocol import LoadStatus, UnderloadedGossip, encode_line
from .flooding import flood_lookup, oracle_lookup, overlay_diameter
from .ledger import Ledger, LedgerExecutor, SimProbe, TaskRecord
from .metrics import LookupRecord, MetricsReport, count_outcomes
from .scenario import Scenario

_START, _TIMER, _DELIVER, _LOOKUP, _CHURN, _TASK, _TASK_END, _SAMPLE = range(8)


@dataclass
class SimResult:
    metrics: MetricsReport
    trace: list[str]
    sim: Simulation


class Simulation:
    def __init__(self, scenario: Scenario, trace: bool = True):
        self.sc = scenario
        self.tracing = trace
        self.trace: list[str] = []
        self.rng = random.Random(f"net/{scenario.seed}")
        self.now = 0.0
        self._seq = 0
        self._queue: list[tuple] = []
        self._tags = 0

        spec = {n.endpoint: n for n in scenario.nodes}
        self.admin = Admin.for_topology(scenario.topology, scenario.hop_threshold)
        tables = {}
        for ep in sorted(spec):
            adm = self.admin.admit_node(ep)
            tables[ep] = adm.tables
            for dst, notice in adm.notices:
                t = tables[dst]
                if notice.domain == t.domain:
                    t.add_member(notice.node)
                else:
                    t.add_external(notice.domain, notice.node)
        self.domain_of = dict(self.admin.assignment)
        self.domain_size = Counter(self.domain_of.values())
        self.n_domains = len(self.domain_size)

        self.ledger = Ledger({ep: (n.base_cpu, n.base_ram) for ep, n in spec.items()})
        self.configs = {ep: scenario.config_for(ep) for ep in spec}
        self.nodes: dict[Endpoint, Node] = {}
        for ep in sorted(spec):
            info = NodeInfo(ep, self.domain_of[ep], spec[ep].capacity_score)
            self.nodes[ep] = Node(info, tables[ep], scenario.services.get(ep, ()), self.configs[ep],
                                  seed=f"{scenario.seed}/{ep}", probe=SimProbe(self.ledger, ep))
        self.online: dict[Endpoint, bool] = {ep: False for ep in spec}
        self.incarnation: dict[Endpoint, int] = {ep: 0 for ep in spec}
        self.timer_gen: dict[Endpoint, dict[str, int]] = {ep: {} for ep in spec}
        self._last_delivery: dict[tuple[Endpoint, Endpoint], float] = {}
        self.executor = LedgerExecutor(self.ledger, lambda ep: self.online[ep], lambda ep: self.configs[ep].thresholds)

        self.by_type: Counter[str] = Counter()
        self.tag_messages: Counter[str] = Counter()
        self.dropped = 0
        self.lost = 0
        self.elections = 0
        self.migrations: Counter[str] = Counter()
        self.migration_log: list[dict[str, Any]] = []
        self.lookups = [LookupRecord(i, q.time, str(q.node), q.service) for i, q in enumerate(scenario.lookups)]
        self._pending_lookups: dict[tuple[Endpoint, int], int] = {}
        self.stddev: list[tuple[float, float]] = []
        self.fanout: Counter[str] = Counter()
        self.conservation_ok = True
        self.flooding_total = 0 if scenario.baseline else None
        self._diameter_cache: dict[frozenset, int] = {}

        for n in scenario.nodes:
            self._push(n.start, _START, n.endpoint)
        for i, w in enumerate(scenario.workload):
            self._push(w.time, _TASK, i)
        for i, q in enumerate(scenario.lookups):
            self._push(q.time, _LOOKUP, i)
        for c in scenario.churn:
            self._push(c.time, _CHURN, c.node, c.event)
        self._push(0.0, _SAMPLE)

    # -- queue -------------------------------------------------------------------

    def _push(self, t: float, kind: int, *payload):
        self._seq += 1
        heapq.heappush(self._queue, (t, self._seq, kind, payload))

    def _new_tag(self) -> str:
        self._tags += 1
        return f"E{self._tags}"

    def _log(self, line: str):
        if self.tracing:
            self.trace.append(f"{self.now:.6f} {line}")

    # -- effects -----------------------------------------------------------------

    def _apply(self, ep: Endpoint, effects, tag: str):
        load_sends = gossip_sends = 0
        class_changed = False
        for e in effects:
            if isinstance(e, Send):
                self._send(ep, e.dest, e.message, tag)
                if isinstance(e.message, LoadStatus):
                    load_sends += 1
                elif isinstance(e.message, UnderloadedGossip):
                    gossip_sends += 1
            elif isinstance(e, StartTimer):
                gens = self.timer_gen[ep]
                gens[e.name] = gens.get(e.name, 0) + 1
                self._push(self.now + e.delay, _TIMER, ep, e.name, gens[e.name], self.incarnation[ep])
            elif isinstance(e, StopTimer):
                gens = self.timer_gen[ep]
                gens[e.name] = gens.get(e.name, 0) + 1
            elif isinstance(e, Note):
                if e.event == "elected":
                    self.elections += 1
                if e.event == "load_class":
                    class_changed = True
                self._log(f"{tag} NOTE {ep} {e.event} {json.dumps(e.detail, sort_keys=True)}")
            elif isinstance(e, Decided):
                self._migrate(e.decision, tag)
            elif isinstance(e, Resolved):
                idx = self._pending_lookups.pop((ep, e.qid), None)
                if idx is not None:
                    self._record_lookup(idx, e.resolution)
        # fan-out bookkeeping for the scope checks
        if class_changed:
            self.fanout["load_class_changes"] += 1
            if load_sends != self.domain_size[self.domain_of[ep]] - 1:
                self.fanout["load_fanout_violations"] += 1
        if gossip_sends:
            self.fanout["gossip_bursts"] += 1
            if gossip_sends > self.n_domains - 1:
                self.fanout["gossip_fanout_violations"] += 1

    def _send(self, src: Endpoint, dst: Endpoint, msg, tag: str):
        self.by_type[msg.TOKEN] += 1
        if tag.startswith("L"):
            self.tag_messages[tag] += 1
        net = self.sc.net
        if net.drops_at(self.now) and self.rng.random() < net.drop_prob:
            self.dropped += 1
            if self.tracing:
                self._log(f"{tag} SEND {src} {dst} DROP {encode_line(msg).rstrip()}")
            return
        delay = self.rng.uniform(net.latency_min, net.latency_max)
        # per-pair FIFO: never deliver before an earlier message on the same pair
        key = (src, dst)
        at = max(self.now + delay, self._last_delivery.get(key, 0.0))
        self._last_delivery[key] = at
        if self.tracing:
            self._log(f"{tag} SEND {src} {dst} {at:.6f} {encode_line(msg).rstrip()}")
        dst_inc = self.incarnation.get(dst)
        self._push(at, _DELIVER, src, dst, msg, tag, self.incarnation[src], dst_inc)

    def _migrate(self, decision, tag: str):
        before = self.ledger.outstanding()
        outcome = execute_migration(decision, self.executor)
        if self.ledger.outstanding() != before or not self.ledger.conserved():
            self.conservation_ok = False
        self.migrations["attempted"] += 1
        self.migrations[outcome.value] += 1
        self.migration_log.append({
            "time": self.now, "task": decision.task_id, "source": str(decision.source),
            "target": str(decision.target), "tier": decision.tier.value, "outcome": outcome.value,
        })
        self._log(f"{tag} MIGRATE {decision.source} {decision.target} {decision.tier.value} "
                  f"{decision.task_id} {outcome.value}")

    def _record_lookup(self, idx: int, res: Resolution):
        rec = self.lookups[idx]
        rec.outcome = res.outcome.value.lower()
        rec.provider = str(res.provider) if res.provider else None
        rec.reason = res.reason
        rec.resolved_at = self.now
        self._log(f"L{idx} RESOLVED {rec.node} {rec.service} {res.outcome.value} {rec.provider or '-'} {res.reason or '-'}")

    # -- global views (metrics and oracles only) ------------------------------------

    def overlay(self) -> dict[Endpoint, set[Endpoint]]:
        graph = {}
        for ep, node in self.nodes.items():
            if not self.online[ep]:
                continue
            nbrs = set(node.tables.local_domain_members) | set(node.tables.external_endpoints())
            graph[ep] = {v for v in nbrs if self.online[v]}
        return graph

    def offers(self) -> dict[Endpoint, frozenset[str]]:
        return {ep: n.own_services for ep, n in self.nodes.items()}

    def oracle(self, service: str) -> frozenset[Endpoint]:
        return oracle_lookup(self.offers(), [ep for ep, up in self.online.items() if up], service)

    def leaders_by_domain(self) -> dict[str, list[Endpoint]]:
        out: dict[str, list[Endpoint]] = {d: [] for d in sorted(self.domain_size)}
        for ep, node in sorted(self.nodes.items()):
            if self.online[ep] and node.is_leader:
                out[node.domain].append(ep)
        return out

    def leader_violations(self) -> list[str]:
        """Domains with other than one online leader, or members that disagree about it."""
        problems = []
        leaders = self.leaders_by_domain()
        for d, ls in leaders.items():
            online = [ep for ep in self.nodes if self.online[ep] and self.domain_of[ep] == d]
            if not online:
                continue
            if len(ls) != 1:
                problems.append(f"{d}: {len(ls)} leaders {[str(x) for x in ls]}")
                continue
            for ep in online:
                if self.nodes[ep].my_leader != ls[0]:
                    problems.append(f"{d}: {ep} follows {self.nodes[ep].my_leader}, leader is {ls[0]}")
        return problems

    # -- main loop -----------------------------------------------------------------

    def run(self) -> SimResult:
        horizon = self.sc.horizon
        while self._queue and self._queue[0][0] <= horizon:
            t, _, kind, payload = heapq.heappop(self._queue)
            self.now = t
            self._dispatch(kind, payload)
        return SimResult(self.report(), self.trace, self)

    def _dispatch(self, kind: int, payload):
        if kind == _DELIVER:
            src, dst, msg, tag, src_inc, dst_inc = payload
            if (not self.online.get(dst, False) or self.incarnation[dst] != dst_inc
                    or self.incarnation[src] != src_inc):
                self.lost += 1
                return
            self._apply(dst, self.nodes[dst].on_message(msg, self.now), tag)
        elif kind == _TIMER:
            ep, name, gen, inc = payload
            if self.online[ep] and inc == self.incarnation[ep] and self.timer_gen[ep].get(name) == gen:
                self._apply(ep, self.nodes[ep].on_timer(name, self.now), self._new_tag())
        elif kind == _START:
            (ep,) = payload
            self._bring_up(ep, fresh=False)
        elif kind == _LOOKUP:
            self._lookup(payload[0])
        elif kind == _CHURN:
            ep, event = payload
            if event == "DOWN":
                if self.online[ep]:
                    self.online[ep] = False
                    self.incarnation[ep] += 1
                    self.timer_gen[ep].clear()
                    self._log(f"- CHURN {ep} DOWN")
            elif not self.online[ep]:
                self._bring_up(ep, fresh=True)
        elif kind == _TASK:
            self._task_arrives(payload[0])
        elif kind == _TASK_END:
            rec = self.ledger.finish(payload[0])
            if rec is not None:
                self._log(f"- TASK_END {rec.task_id} {rec.node}")
        elif kind == _SAMPLE:
            utils = [self.ledger.util(ep)[0] for ep in sorted(self.nodes) if self.online[ep]]
            self.stddev.append((self.now, pstdev(utils) if len(utils) > 1 else 0.0))
            self._push(self.now + 1.0, _SAMPLE)

    def _bring_up(self, ep: Endpoint, fresh: bool):
        self.incarnation[ep] += 1
        self.timer_gen[ep].clear()
        if fresh:
            self.nodes[ep].restart()
        self.online[ep] = True
        self._log(f"- {'CHURN ' + str(ep) + ' UP' if fresh else 'START ' + str(ep)}")
        self._apply(ep, self.nodes[ep].on_start(self.now), self._new_tag())

    def _task_arrives(self, i: int):
        w = self.sc.workload[i]
        rec = TaskRecord(f"t{i}", w.node, w.cpu_share, w.ram_share, self.now + w.duration)
        self.ledger.add(rec)
        self._push(rec.ends_at, _TASK_END, rec.task_id)
        self._log(f"- TASK {rec.task_id} {w.node} {w.cpu_share:.4f} {w.ram_share:.4f}")

    def _lookup(self, i: int):
        q = self.sc.lookups[i]
        tag = f"L{i}"
        rec = self.lookups[i]
        if not self.online[q.node]:
            rec.outcome = "offline"
            return
        if self.flooding_total is not None:
            graph = self.overlay()
            key = frozenset(graph)
            if key not in self._diameter_cache:
                self._diameter_cache[key] = overlay_diameter(graph)
            flood = flood_lookup(graph, self.offers(), q.node, q.service, self._diameter_cache[key])
            rec.flooding_messages = flood.messages
            self.flooding_total += flood.messages
        res, effects = self.nodes[q.node].resolve_service(q.service, self.now)
        self._log(f"{tag} LOOKUP {q.node} {q.service}")
        if res.pending:
            self._pending_lookups[(q.node, res.qid)] = i
        else:
            self._record_lookup(i, res)
        self._apply(q.node, effects, tag)

    # -- report ------------------------------------------------------------------------

    def report(self) -> MetricsReport:
        for rec in self.lookups:
            rec.messages = self.tag_messages[f"L{rec.index}"]
        by_type = dict(sorted(self.by_type.items()))
        mig = {k: self.migrations[k] for k in ("attempted", "migrated", "refused", "failed", "skipped")}
        mig["succeeded"] = mig["migrated"]
        return MetricsReport(
            messages_by_type=by_type,
            messages_total=sum(by_type.values()),
            messages_dropped=self.dropped,
            messages_lost=self.lost,
            per_lookup_messages=[r.messages for r in self.lookups],
            lookup_outcomes=count_outcomes(self.lookups),
            lookups=self.lookups,
            load_stddev_series=self.stddev,
            migrations=mig,
            migration_log=self.migration_log,
            leader_elections=self.elections,
            flooding_messages_total=self.flooding_total,
            fanout={k: self.fanout[k] for k in ("load_class_changes", "load_fanout_violations",
                                                "gossip_bursts", "gossip_fanout_violations")},
            conservation_ok=self.conservation_ok and self.ledger.conserved(),
            leaders={d: [str(x) for x in ls] for d, ls in self.leaders_by_domain().items()},
        )


def run(scenario: Scenario, trace: bool = True) -> SimResult:
    return Simulation(scenario, trace=trace).run()

