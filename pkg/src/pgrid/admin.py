"""Bootstrap admin: groups nodes into domains by hop count and hands out initial tables."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .model import Endpoint, MembershipTables, ModelError
from .protocol import MemberNotice

EXT_SAMPLE_SIZE = 2


class DuplicateEndpoint(ModelError):
    pass


class UnknownNode(ModelError):
    pass


@dataclass(frozen=True)
class Topology:
    """Nodes plus a symmetric hop-count matrix keyed by unordered endpoint pairs."""

    nodes: tuple[Endpoint, ...]
    hops: Mapping[frozenset[Endpoint], int]

    def __post_init__(self):
        eps = list(self.nodes)
        if len(set(eps)) != len(eps):
            dup = sorted({e for e in eps if eps.count(e) > 1})
            raise DuplicateEndpoint(f"duplicate endpoint {dup[0]}")
        for i, a in enumerate(eps):
            for b in eps[i + 1:]:
                h = self.hops.get(frozenset((a, b)))
                if h is None:
                    raise ModelError(f"missing hop count for {a} - {b}")
                if isinstance(h, bool) or not isinstance(h, int) or h < 0:
                    raise ModelError(f"bad hop count {h!r} for {a} - {b}")

    @classmethod
    def from_triples(cls, nodes, triples, default_hop: int | None = None) -> Topology:
        """Build from ``(a, b, hops)`` triples; pairs not listed get ``default_hop`` if given."""
        hops: dict[frozenset[Endpoint], int] = {}
        for a, b, h in triples:
            key = frozenset((a, b))
            if a == b:
                raise ModelError(f"self hop for {a}")
            if key in hops and hops[key] != h:
                raise ModelError(f"asymmetric hop count for {a} - {b}")
            hops[key] = h
        nodes = tuple(nodes)
        if default_hop is not None:
            for i, a in enumerate(nodes):
                for b in nodes[i + 1:]:
                    hops.setdefault(frozenset((a, b)), default_hop)
        return cls(nodes, hops)

    def hop(self, a: Endpoint, b: Endpoint) -> int:
        return 0 if a == b else self.hops[frozenset((a, b))]


def assign_domains(topology: Topology, hop_threshold: int) -> dict[Endpoint, str]:
    """Greedy clustering in endpoint order; domains are named D1, D2, ... by founding order."""
    if hop_threshold < 1:
        raise ModelError("hop_threshold must be >= 1")
    domains: list[list[Endpoint]] = []
    out: dict[Endpoint, str] = {}
    for ep in sorted(topology.nodes):
        for i, members in enumerate(domains):
            if all(topology.hop(ep, m) < hop_threshold for m in members):
                members.append(ep)
                out[ep] = f"D{i + 1}"
                break
        else:
            domains.append([ep])
            out[ep] = f"D{len(domains)}"
    return out


@dataclass
class Admission:
    tables: MembershipTables
    notices: list[tuple[Endpoint, MemberNotice]]


@dataclass
class Admin:
    """Serialized admission against a fixed domain assignment."""

    assignment: dict[Endpoint, str]
    ext_sample_size: int = EXT_SAMPLE_SIZE
    admitted: dict[Endpoint, str] = field(default_factory=dict)

    @classmethod
    def for_topology(cls, topology: Topology, hop_threshold: int, **kw) -> Admin:
        return cls(assign_domains(topology, hop_threshold), **kw)

    def members(self, domain: str) -> list[Endpoint]:
        return sorted(ep for ep, d in self.admitted.items() if d == domain)

    def tables_for(self, ep: Endpoint) -> MembershipTables:
        domain = self.admitted[ep]
        ext: dict[str, set[Endpoint]] = {}
        for other in sorted(self.admitted):
            d = self.admitted[other]
            if d != domain and len(ext.setdefault(d, set())) < self.ext_sample_size:
                ext[d].add(other)
        return MembershipTables(ep, domain, set(self.members(domain)) - {ep}, ext)

    def admit_node(self, ep: Endpoint) -> Admission:
        if ep in self.admitted:
            raise DuplicateEndpoint(str(ep))
        domain = self.assignment.get(ep)
        if domain is None:
            raise UnknownNode(str(ep))
        notices: list[tuple[Endpoint, MemberNotice]] = []
        note = MemberNotice(domain, ep)
        # same-domain peers always learn of the newcomer; foreign nodes only
        # while their sample of this domain is still short
        short = len(self.members(domain)) < self.ext_sample_size
        for other in sorted(self.admitted):
            if short or self.admitted[other] == domain:
                notices.append((other, note))
        self.admitted[ep] = domain
        return Admission(self.tables_for(ep), notices)
