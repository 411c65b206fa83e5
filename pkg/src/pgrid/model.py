"""Domain types shared by every part of the grid: endpoints, load, and the per-node tables.

The table operations here are pure: they take a value and return a new one,
so the node engine can swap its state wholesale after each event.
"""

from __future__ import annotations

import enum
import ipaddress
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

NAME_RE = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.\-]*")


class ModelError(ValueError):
    pass


def check_name(text: str, what: str = "name") -> str:
    """Validate a domain or service name (non-empty, no whitespace or list separators)."""
    if not isinstance(text, str) or not NAME_RE.fullmatch(text):
        raise ModelError(f"invalid {what}: {text!r}")
    return text


@dataclass(frozen=True)
class Endpoint:
    address: str
    port: int
    sort_key: tuple[int, int] = field(init=False, repr=False, compare=False, hash=False)
    _hash: int = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        try:
            ip = ipaddress.IPv4Address(self.address)
        except (ipaddress.AddressValueError, ValueError, TypeError) as exc:
            raise ModelError(f"bad address {self.address!r}") from exc
        if str(ip) != self.address:
            raise ModelError(f"non-canonical address {self.address!r}")
        if isinstance(self.port, bool) or not isinstance(self.port, int) or not 1 <= self.port <= 65535:
            raise ModelError(f"bad port {self.port!r}")
        # octet-wise then port; fixes every deterministic tie-break
        object.__setattr__(self, "sort_key", (int(ip), self.port))
        object.__setattr__(self, "_hash", hash(self.sort_key))

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        if other.__class__ is not Endpoint:
            return NotImplemented
        return self.sort_key == other.sort_key

    @classmethod
    def parse(cls, text: str) -> Endpoint:
        host, sep, port = text.rpartition(":")
        if not sep or not port.isdigit() or (len(port) > 1 and port[0] == "0"):
            raise ModelError(f"bad endpoint {text!r}")
        return cls(host, int(port))

    def __lt__(self, other: Endpoint) -> bool:
        return self.sort_key < other.sort_key

    def __le__(self, other: Endpoint) -> bool:
        return self.sort_key <= other.sort_key

    def __gt__(self, other: Endpoint) -> bool:
        return self.sort_key > other.sort_key

    def __ge__(self, other: Endpoint) -> bool:
        return self.sort_key >= other.sort_key

    def __str__(self) -> str:
        return f"{self.address}:{self.port}"


@dataclass(frozen=True)
class NodeInfo:
    endpoint: Endpoint
    domain: str
    capacity_score: float = 1.0

    def __post_init__(self):
        check_name(self.domain, "domain")
        if not self.capacity_score >= 0:
            raise ModelError(f"capacity_score must be >= 0, got {self.capacity_score}")


@dataclass(frozen=True)
class LoadSample:
    cpu_util: float
    ram_util: float
    timestamp: float = 0.0

    def __post_init__(self):
        for name in ("cpu_util", "ram_util"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ModelError(f"{name} out of [0,1]: {v}")


class LoadClass(enum.Enum):
    UNDER_BOTH = "UB"
    UNDER_CPU_ONLY = "UC"
    UNDER_RAM_ONLY = "UR"
    NORMAL = "NO"
    OVERLOADED = "OV"

    @property
    def is_under(self) -> bool:
        return self in (LoadClass.UNDER_BOTH, LoadClass.UNDER_CPU_ONLY, LoadClass.UNDER_RAM_ONLY)


@dataclass(frozen=True)
class LoadThresholds:
    under_cpu: float = 0.40
    under_ram: float = 0.60
    over_cpu: float = 0.85
    over_ram: float = 0.90

    def __post_init__(self):
        if not (0 <= self.under_cpu <= self.over_cpu <= 1 and 0 <= self.under_ram <= self.over_ram <= 1):
            raise ModelError(f"inconsistent thresholds {self}")


def classify_load(sample: LoadSample, thresholds: LoadThresholds = LoadThresholds()) -> LoadClass:
    t = thresholds
    if sample.cpu_util >= t.over_cpu or sample.ram_util >= t.over_ram:
        return LoadClass.OVERLOADED
    cpu_low = sample.cpu_util < t.under_cpu
    ram_low = sample.ram_util < t.under_ram
    if cpu_low and ram_low:
        return LoadClass.UNDER_BOTH
    if cpu_low:
        return LoadClass.UNDER_CPU_ONLY
    if ram_low:
        return LoadClass.UNDER_RAM_ONLY
    return LoadClass.NORMAL


@dataclass(frozen=True)
class UnderLoadedLocalList:
    """Under-loaded peers of the local domain, split into three disjoint sections."""

    section_both: frozenset[Endpoint] = frozenset()
    section_cpu: frozenset[Endpoint] = frozenset()
    section_ram: frozenset[Endpoint] = frozenset()
    last_update: Mapping[Endpoint, float] = field(default_factory=dict)

    def members(self) -> frozenset[Endpoint]:
        return self.section_both | self.section_cpu | self.section_ram

    def section_of(self, ep: Endpoint) -> LoadClass | None:
        for cls, sec in _SECTIONS:
            if ep in getattr(self, sec):
                return cls
        return None

    def __len__(self) -> int:
        return len(self.members())


_SECTIONS = (
    (LoadClass.UNDER_BOTH, "section_both"),
    (LoadClass.UNDER_CPU_ONLY, "section_cpu"),
    (LoadClass.UNDER_RAM_ONLY, "section_ram"),
)


def apply_load_status(lst: UnderLoadedLocalList, sender: Endpoint, cls: LoadClass, now: float) -> UnderLoadedLocalList:
    if cls.is_under and lst.section_of(sender) is cls:
        # keepalive: same section, fresh timestamp
        return replace(lst, last_update={**lst.last_update, sender: now})
    sections = {name: getattr(lst, name) - {sender} for _, name in _SECTIONS}
    stamps = dict(lst.last_update)
    stamps.pop(sender, None)
    for c, name in _SECTIONS:
        if c is cls:
            sections[name] = sections[name] | {sender}
            stamps[sender] = now
    return UnderLoadedLocalList(last_update=stamps, **sections)


def expire_stale(lst: UnderLoadedLocalList, now: float, ttl: float) -> UnderLoadedLocalList:
    if ttl <= 0:
        raise ModelError("ttl must be positive")
    stale = {ep for ep, ts in lst.last_update.items() if now - ts > ttl}
    if not stale:
        return lst
    return UnderLoadedLocalList(
        section_both=lst.section_both - stale,
        section_cpu=lst.section_cpu - stale,
        section_ram=lst.section_ram - stale,
        last_update={ep: ts for ep, ts in lst.last_update.items() if ep not in stale},
    )


@dataclass
class MembershipTables:
    """The node's view of its own domain and the rest of the grid.

    Owned and mutated by a single node; ``own`` and ``domain`` guard the
    invariants that the node never lists itself nor its own domain as foreign.
    """

    own: Endpoint
    domain: str
    local_domain_members: set[Endpoint] = field(default_factory=set)
    external_nodes_list: dict[str, set[Endpoint]] = field(default_factory=dict)
    other_group_leader_list: dict[str, Endpoint] = field(default_factory=dict)
    external_under_loaded_list: dict[str, frozenset[Endpoint]] = field(default_factory=dict)

    def __post_init__(self):
        self.local_domain_members.discard(self.own)
        for table in (self.external_nodes_list, self.other_group_leader_list, self.external_under_loaded_list):
            table.pop(self.domain, None)

    def add_member(self, ep: Endpoint) -> bool:
        if ep == self.own or ep in self.local_domain_members:
            return False
        self.local_domain_members.add(ep)
        return True

    def add_external(self, domain: str, ep: Endpoint, cap: int | None = None) -> bool:
        if domain == self.domain:
            return False
        known = self.external_nodes_list.setdefault(domain, set())
        if ep in known or (cap is not None and len(known) >= cap):
            return False
        known.add(ep)
        return True

    def external_endpoints(self) -> list[Endpoint]:
        return [ep for d in sorted(self.external_nodes_list) for ep in sorted(self.external_nodes_list[d])]


@dataclass(frozen=True)
class ServiceTables:
    own_services: frozenset[str] = frozenset()
    local_domain_services: Mapping[str, frozenset[Endpoint]] = field(default_factory=dict)

    def __post_init__(self):
        for s in self.own_services:
            check_name(s, "service")

    def providers(self, service: str) -> frozenset[Endpoint]:
        return self.local_domain_services.get(service, frozenset())

    def offered_by(self, ep: Endpoint) -> frozenset[str]:
        return frozenset(s for s, eps in self.local_domain_services.items() if ep in eps)


def merge_service_announcement(tables: ServiceTables, sender: Endpoint, services: Iterable[str]) -> ServiceTables:
    """Replace everything attributed to ``sender`` with its announced set."""
    announced = frozenset(services)
    merged: dict[str, frozenset[Endpoint]] = {}
    for name, eps in tables.local_domain_services.items():
        rest = eps - {sender}
        if rest:
            merged[name] = rest
    for name in announced:
        merged[name] = merged.get(name, frozenset()) | {sender}
    return replace(tables, local_domain_services=merged)
