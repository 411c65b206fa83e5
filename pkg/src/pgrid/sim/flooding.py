"""Flooding baseline and the global-knowledge lookup oracle.

Both read global simulator state, which node handlers never do.  The flood
is counted, not simulated message by message: with a TTL equal to the overlay
diameter every reachable node is reached, and a node forwards once, on first
receipt, to every neighbour except the one it heard from.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Mapping

from ..model import Endpoint


@dataclass(frozen=True)
class FloodResult:
    providers: frozenset[Endpoint]
    messages: int
    reached: int


def overlay_diameter(graph: Mapping[Endpoint, Iterable[Endpoint]]) -> int:
    diameter = 0
    for src in sorted(graph):
        diameter = max(diameter, max(_bfs(graph, src)[0].values()))
    return diameter


def _bfs(graph, origin):
    level = {origin: 0}
    parent: dict[Endpoint, Endpoint] = {}
    q = deque([origin])
    while q:
        u = q.popleft()
        for v in sorted(graph.get(u, ())):
            if v not in level:
                level[v] = level[u] + 1
                parent[v] = u
                q.append(v)
    return level, parent


def flood_lookup(
    graph: Mapping[Endpoint, Iterable[Endpoint]],
    offers: Mapping[Endpoint, frozenset[str]],
    origin: Endpoint,
    service: str,
    ttl: int | None = None,
) -> FloodResult:
    """Count messages for one TTL-limited flood from ``origin`` plus one reply per provider reached."""
    if service in offers.get(origin, frozenset()):
        return FloodResult(frozenset({origin}), 0, 0)
    if ttl is None:
        ttl = overlay_diameter(graph)
    level, parent = _bfs(graph, origin)
    messages = 0
    for u, lv in level.items():
        if lv >= ttl:
            continue
        out = set(graph.get(u, ()))
        if u in parent:
            out.discard(parent[u])
        messages += len(out)
    reached = {v for v, lv in level.items() if 0 < lv <= ttl}
    providers = frozenset(v for v in reached if service in offers.get(v, frozenset()))
    return FloodResult(providers, messages + len(providers), len(reached))


def oracle_lookup(offers: Mapping[Endpoint, frozenset[str]], online: Iterable[Endpoint], service: str) -> frozenset[Endpoint]:
    """Ground truth: every online node whose own services include ``service``."""
    return frozenset(ep for ep in online if service in offers.get(ep, frozenset()))
