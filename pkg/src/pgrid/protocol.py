"""Wire vocabulary and the line-oriented text codec.

Every datagram is one UTF-8 line::

    PG1 <TYPE> <field> <field> ...\\n

Endpoints are ``a.b.c.d:port``, reals carry exactly two decimals, lists are
comma-separated without spaces (``-`` for an empty list), and a few replies
take an optional trailing reason token.  ``docs/wire-format.md`` lists every
variant; ``tests/golden/`` holds the conformance corpus.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, fields
from typing import Callable, ClassVar, Sequence, Union

from .model import Endpoint, LoadClass, ModelError, check_name

MAGIC = "PG1"
MAX_DATAGRAM = 1200

_REAL_RE = re.compile(r"(0|[1-9][0-9]*)\.[0-9]{2}")
_INT_RE = re.compile(r"0|[1-9][0-9]{0,18}")
_REASON_RE = re.compile(r"[a-z][a-z_]*")


class ProtocolError(Exception):
    pass


class MalformedMessage(ProtocolError):
    pass


class OversizeMessage(ProtocolError):
    pass


class PortClass(enum.IntEnum):
    """Offset from a node's base port; ``DIRECT`` messages go to the exact port given."""

    LOAD = 0
    LEADER = 1
    BALANCE = 2
    SERVICE = 3
    DIRECT = -1


class Outcome(enum.Enum):
    LOCAL = "LOCAL"
    DOMAIN = "DOMAIN"
    REMOTE = "REMOTE"
    NOTFOUND = "NOTFOUND"


# field kinds -----------------------------------------------------------------

def _real(v: float) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ModelError(f"bad real {v!r}")
    v = round(float(v), 2) + 0.0
    if v < 0:
        raise ModelError(f"negative real {v}")
    return v


def _unit(v: float) -> float:
    v = _real(v)
    if v > 1.0:
        raise ModelError(f"utilization above 1: {v}")
    return v


def _int(v: int) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < 10**19:
        raise ModelError(f"bad integer {v!r}")
    return v


def _eps(v: Sequence[Endpoint]) -> tuple[Endpoint, ...]:
    out = tuple(v)
    if not all(isinstance(e, Endpoint) for e in out):
        raise ModelError("endpoint list holds a non-endpoint")
    return out


def _names(v: Sequence[str]) -> tuple[str, ...]:
    return tuple(check_name(s, "service") for s in v)


def _reason(v: str) -> str:
    if v and not _REASON_RE.fullmatch(v):
        raise ModelError(f"bad reason {v!r}")
    return v


def _extmap(v) -> tuple[tuple[str, tuple[Endpoint, ...]], ...]:
    items = v.items() if isinstance(v, dict) else v
    out = []
    for dom, eps in items:
        eps = _eps(eps)
        if not eps:
            raise ModelError(f"empty endpoint list for domain {dom}")
        out.append((check_name(dom, "domain"), eps))
    out.sort(key=lambda kv: kv[0])
    if len({d for d, _ in out}) != len(out):
        raise ModelError("duplicate domain in external map")
    return tuple(out)


def _check_ep(v: Endpoint) -> Endpoint:
    if not isinstance(v, Endpoint):
        raise ModelError(f"not an endpoint: {v!r}")
    return v


def _check_cls(v: LoadClass) -> LoadClass:
    if not isinstance(v, LoadClass):
        raise ModelError(f"not a load class: {v!r}")
    return v


def _check_outcome(v: Outcome) -> Outcome:
    if not isinstance(v, Outcome):
        raise ModelError(f"not an outcome: {v!r}")
    return v


def _opt_ep(v: Endpoint | None) -> Endpoint | None:
    return None if v is None else _check_ep(v)


def _join(items, fmt=str) -> str:
    return ",".join(fmt(i) for i in items) if items else "-"


def _split(tok: str) -> list[str]:
    if tok == "-":
        return []
    parts = tok.split(",")
    if any(not p for p in parts):
        raise MalformedMessage(f"empty list element in {tok!r}")
    return parts


def _parse_real(tok: str) -> float:
    if not _REAL_RE.fullmatch(tok):
        raise MalformedMessage(f"bad real {tok!r}")
    return float(tok)


def _parse_int(tok: str) -> int:
    if not _INT_RE.fullmatch(tok):
        raise MalformedMessage(f"bad integer {tok!r}")
    return int(tok)


def _fmt_extmap(v) -> str:
    if not v:
        return "-"
    return ";".join(f"{d}={_join(eps)}" for d, eps in v)


def _parse_extmap(tok: str):
    if tok == "-":
        return ()
    out = []
    for part in tok.split(";"):
        dom, sep, rest = part.partition("=")
        if not sep:
            raise MalformedMessage(f"bad external map entry {part!r}")
        out.append((dom, [Endpoint.parse(e) for e in _split(rest)]))
    return out


_CLASS_BY_TOKEN = {c.value: c for c in LoadClass}
_OUTCOME_BY_TOKEN = {o.value: o for o in Outcome}


def _parse_cls(tok: str) -> LoadClass:
    try:
        return _CLASS_BY_TOKEN[tok]
    except KeyError:
        raise MalformedMessage(f"bad load class {tok!r}") from None


def _parse_outcome(tok: str) -> Outcome:
    try:
        return _OUTCOME_BY_TOKEN[tok]
    except KeyError:
        raise MalformedMessage(f"bad outcome {tok!r}") from None


# kind -> (normalize, format, parse)
_KINDS: dict[str, tuple[Callable, Callable[..., str], Callable[[str], object]]] = {
    "ep": (_check_ep, str, Endpoint.parse),
    "opt_ep": (_opt_ep, lambda v: "-" if v is None else str(v), lambda t: None if t == "-" else Endpoint.parse(t)),
    "real": (_real, lambda v: f"{v:.2f}", _parse_real),
    "unit": (_unit, lambda v: f"{v:.2f}", _parse_real),
    "int": (_int, str, _parse_int),
    "cls": (_check_cls, lambda v: v.value, _parse_cls),
    "outcome": (_check_outcome, lambda v: v.value, _parse_outcome),
    "domain": (lambda v: check_name(v, "domain"), str, str),
    "service": (lambda v: check_name(v, "service"), str, str),
    "eps": (_eps, _join, lambda t: [Endpoint.parse(e) for e in _split(t)]),
    "names": (_names, _join, _split),
    "extmap": (_extmap, _fmt_extmap, _parse_extmap),
    "reason": (_reason, str, str),
}


class _Wire:
    """Mixin giving each message its token, field grammar and port class."""

    TOKEN: ClassVar[str]
    KINDS: ClassVar[tuple[str, ...]]
    PORT: ClassVar[PortClass]

    def __post_init__(self):
        for f, kind in zip(fields(self), self.KINDS):
            norm = _KINDS[kind][0]
            object.__setattr__(self, f.name, norm(getattr(self, f.name)))

    @property
    def type_name(self) -> str:
        return type(self).__name__


@dataclass(frozen=True)
class LoadStatus(_Wire):
    sender: Endpoint
    cpu: float
    ram: float
    load_class: LoadClass
    TOKEN = "LOAD"
    KINDS = ("ep", "unit", "unit", "cls")
    PORT = PortClass.LOAD


@dataclass(frozen=True)
class GlQuery(_Wire):
    sender: Endpoint
    TOKEN = "GLQ"
    KINDS = ("ep",)
    PORT = PortClass.LEADER


@dataclass(frozen=True)
class GlReply(_Wire):
    leader: Endpoint
    domain: str
    epoch: int
    score: float
    TOKEN = "GLR"
    KINDS = ("ep", "domain", "int", "real")
    PORT = PortClass.LEADER


@dataclass(frozen=True)
class GlOfDomainQuery(_Wire):
    sender: Endpoint
    TOKEN = "GDQ"
    KINDS = ("ep",)
    PORT = PortClass.LEADER


@dataclass(frozen=True)
class GlOfDomainReply(_Wire):
    domain: str
    leader: Endpoint
    epoch: int
    TOKEN = "GDR"
    KINDS = ("domain", "ep", "int")
    PORT = PortClass.LEADER


@dataclass(frozen=True)
class UnderloadedGossip(_Wire):
    domain: str
    nodes: tuple[Endpoint, ...]
    TOKEN = "ULG"
    KINDS = ("domain", "eps")
    PORT = PortClass.BALANCE


@dataclass(frozen=True)
class ExtUnderloadedQuery(_Wire):
    sender: Endpoint
    TOKEN = "EUQ"
    KINDS = ("ep",)
    PORT = PortClass.BALANCE


@dataclass(frozen=True)
class ExtUnderloadedReply(_Wire):
    nodes: tuple[Endpoint, ...]
    reason: str = ""
    TOKEN = "EUR"
    KINDS = ("eps", "reason")
    PORT = PortClass.BALANCE


@dataclass(frozen=True)
class OwnServices(_Wire):
    sender: Endpoint
    services: tuple[str, ...]
    TOKEN = "OWNS"
    KINDS = ("ep", "names")
    PORT = PortClass.SERVICE


@dataclass(frozen=True)
class ServiceQuery(_Wire):
    origin: Endpoint
    service: str
    qid: int
    TOKEN = "SQRY"
    KINDS = ("ep", "service", "int")
    PORT = PortClass.SERVICE


@dataclass(frozen=True)
class ServiceFwd(_Wire):
    origin: Endpoint
    via_gl: Endpoint
    service: str
    qid: int
    TOKEN = "SFWD"
    KINDS = ("ep", "ep", "service", "int")
    PORT = PortClass.SERVICE


@dataclass(frozen=True)
class ServiceReply(_Wire):
    service: str
    qid: int
    providers: tuple[Endpoint, ...]
    reason: str = ""
    TOKEN = "SREP"
    KINDS = ("service", "int", "eps", "reason")
    PORT = PortClass.SERVICE


@dataclass(frozen=True)
class AdminJoin(_Wire):
    node: Endpoint
    score: float
    TOKEN = "AJOIN"
    KINDS = ("ep", "real")
    PORT = PortClass.DIRECT


@dataclass(frozen=True)
class AdminTables(_Wire):
    node: Endpoint
    domain: str
    members: tuple[Endpoint, ...]
    external: tuple[tuple[str, tuple[Endpoint, ...]], ...]
    TOKEN = "ATAB"
    KINDS = ("ep", "domain", "eps", "extmap")
    PORT = PortClass.DIRECT


@dataclass(frozen=True)
class AdminNak(_Wire):
    node: Endpoint
    reason: str
    TOKEN = "ANAK"
    KINDS = ("ep", "reason")
    PORT = PortClass.DIRECT


@dataclass(frozen=True)
class MemberNotice(_Wire):
    domain: str
    node: Endpoint
    TOKEN = "MNOT"
    KINDS = ("domain", "ep")
    PORT = PortClass.LEADER


@dataclass(frozen=True)
class Lookup(_Wire):
    reply_to: Endpoint
    service: str
    qid: int
    TOKEN = "LKUP"
    KINDS = ("ep", "service", "int")
    PORT = PortClass.SERVICE


@dataclass(frozen=True)
class LookupResult(_Wire):
    qid: int
    outcome: Outcome
    provider: Endpoint | None
    reason: str = ""
    TOKEN = "LRES"
    KINDS = ("int", "outcome", "opt_ep", "reason")
    PORT = PortClass.DIRECT


Message = Union[
    LoadStatus, GlQuery, GlReply, GlOfDomainQuery, GlOfDomainReply, UnderloadedGossip,
    ExtUnderloadedQuery, ExtUnderloadedReply, OwnServices, ServiceQuery, ServiceFwd, ServiceReply,
    AdminJoin, AdminTables, AdminNak, MemberNotice, Lookup, LookupResult,
]

ALL_TYPES: tuple[type, ...] = Message.__args__  # type: ignore[attr-defined]
BY_TOKEN: dict[str, type] = {cls.TOKEN: cls for cls in ALL_TYPES}


def port_class(m: Message) -> PortClass:
    return type(m).PORT


def encode_line(m: Message) -> str:
    parts = [MAGIC, m.TOKEN]
    for f, kind in zip(fields(m), m.KINDS):
        value = getattr(m, f.name)
        if kind == "reason" and value == "" and f.default == "":
            continue
        parts.append(_KINDS[kind][1](value))
    return " ".join(parts) + "\n"


def encode(m: Message) -> bytes:
    data = encode_line(m).encode("utf-8")
    if len(data) > MAX_DATAGRAM:
        raise OversizeMessage(f"{m.TOKEN} encodes to {len(data)} bytes (> {MAX_DATAGRAM})")
    return data


def decode(data: bytes) -> Message:
    """Parse one datagram; anything encode() could not have produced is rejected."""
    if not isinstance(data, (bytes, bytearray)):
        raise MalformedMessage("not bytes")
    if len(data) > MAX_DATAGRAM:
        raise MalformedMessage("datagram too long")
    try:
        text = bytes(data).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedMessage("not utf-8") from exc
    if not text.endswith("\n") or "\n" in text[:-1]:
        raise MalformedMessage("expected exactly one newline-terminated line")
    toks = text[:-1].split(" ")
    if len(toks) < 2 or toks[0] != MAGIC:
        raise MalformedMessage("bad prefix")
    cls = BY_TOKEN.get(toks[1])
    if cls is None:
        raise MalformedMessage(f"unknown type {toks[1]!r}")
    flds = fields(cls)
    args = toks[2:]
    required = sum(1 for k in cls.KINDS if k != "reason") + sum(
        1 for f, k in zip(flds, cls.KINDS) if k == "reason" and f.default != ""
    )
    if not required <= len(args) <= len(flds):
        raise MalformedMessage(f"{cls.TOKEN}: arity {len(args)}")
    try:
        values = [_KINDS[k][2](tok) for tok, k in zip(args, cls.KINDS)]
        msg = cls(*values)
    except (ModelError, ValueError, TypeError) as exc:
        raise MalformedMessage(f"{cls.TOKEN}: {exc}") from exc
    if encode_line(msg) != text:
        raise MalformedMessage("non-canonical encoding")
    return msg


def fit_list(build: Callable[[tuple], Message], items: Sequence) -> Message:
    """Build the message with the longest prefix of ``items`` that still fits a datagram."""
    lo, hi = 0, len(items)
    if len(encode_line(build(tuple(items))).encode()) <= MAX_DATAGRAM:
        return build(tuple(items))
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if len(encode_line(build(tuple(items[:mid]))).encode()) <= MAX_DATAGRAM:
            lo = mid
        else:
            hi = mid - 1
    return build(tuple(items[:lo]))
