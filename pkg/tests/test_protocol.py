from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pgrid.model import Endpoint, LoadClass
from pgrid.protocol import (
    ALL_TYPES,
    MAX_DATAGRAM,
    AdminJoin,
    AdminNak,
    AdminTables,
    ExtUnderloadedQuery,
    ExtUnderloadedReply,
    GlOfDomainQuery,
    GlOfDomainReply,
    GlQuery,
    GlReply,
    LoadStatus,
    Lookup,
    LookupResult,
    MalformedMessage,
    MemberNotice,
    Outcome,
    OversizeMessage,
    OwnServices,
    PortClass,
    ServiceFwd,
    ServiceQuery,
    ServiceReply,
    UnderloadedGossip,
    decode,
    encode,
    fit_list,
)

from strategies import endpoints, load_classes, names, units
from wire_cases import CASES

GOLDEN = Path(__file__).parent / "golden"

eps_lists = st.lists(endpoints, max_size=5).map(tuple)
ints = st.integers(0, 10**18)
reals = st.integers(0, 100000).map(lambda i: i / 100)
reasons = st.sampled_from(["", "notleader", "timeout", "no_provider"])
extmaps = st.dictionaries(names, st.lists(endpoints, min_size=1, max_size=3).map(tuple), max_size=3).map(
    lambda d: tuple(sorted(d.items())))

messages = st.one_of(
    st.builds(LoadStatus, endpoints, units, units, load_classes),
    st.builds(GlQuery, endpoints),
    st.builds(GlReply, endpoints, names, ints, reals),
    st.builds(GlOfDomainQuery, endpoints),
    st.builds(GlOfDomainReply, names, endpoints, ints),
    st.builds(UnderloadedGossip, names, eps_lists),
    st.builds(ExtUnderloadedQuery, endpoints),
    st.builds(ExtUnderloadedReply, eps_lists, reasons),
    st.builds(OwnServices, endpoints, st.lists(names, max_size=6).map(tuple)),
    st.builds(ServiceQuery, endpoints, names, ints),
    st.builds(ServiceFwd, endpoints, endpoints, names, ints),
    st.builds(ServiceReply, names, ints, eps_lists, reasons),
    st.builds(AdminJoin, endpoints, reals),
    st.builds(AdminTables, endpoints, names, eps_lists, extmaps),
    st.builds(AdminNak, endpoints, st.sampled_from(["unknown_node", "too_large"])),
    st.builds(MemberNotice, names, endpoints),
    st.builds(Lookup, endpoints, names, ints),
    st.builds(LookupResult, ints, st.sampled_from(list(Outcome)), st.none() | endpoints, reasons),
)


def test_load_status_example():
    m = LoadStatus(Endpoint("172.31.72.42", 7401), 0.30, 0.50, LoadClass.UNDER_BOTH)
    assert encode(m) == b"PG1 LOAD 172.31.72.42:7401 0.30 0.50 UB\n"
    assert decode(b"PG1 LOAD 172.31.72.42:7401 0.30 0.50 UB\n") == m


def test_service_reply_example():
    m = ServiceReply("S2", 7, (Endpoint("172.31.72.43", 7404),))
    assert encode(m) == b"PG1 SREP S2 7 172.31.72.43:7404\n"


@pytest.mark.parametrize("name", sorted(CASES))
def test_golden(name):
    data = (GOLDEN / f"{name}.txt").read_bytes()
    assert encode(CASES[name]) == data
    assert decode(data) == CASES[name]


def test_golden_covers_every_variant():
    assert {type(m) for m in CASES.values()} == set(ALL_TYPES)
    assert {p.stem for p in GOLDEN.glob("*.txt")} == set(CASES)


@given(messages)
def test_roundtrip(m):
    data = encode(m)
    assert len(data) <= MAX_DATAGRAM
    assert decode(data) == m


@pytest.mark.parametrize("data", [
    b"PG0 LOAD 172.31.72.42:7401 0.30 0.50 UB\n",
    b"PG1 LOAD 999.1.1.1:7401 0.30 0.50 UB\n",
    b"PG1 LOAD 172.31.72.42:7401 0.30 0.50 UB",
    b"PG1 LOAD 172.31.72.42:7401 0.3 0.50 UB\n",
    b"PG1 LOAD 172.31.72.42:7401 1.30 0.50 UB\n",
    b"PG1 LOAD 172.31.72.42:7401 0.30 0.50 XX\n",
    b"PG1 LOAD 172.31.72.42:7401 0.30 0.50\n",
    b"PG1 LOAD 172.31.72.42:7401 0.30 0.50 UB extra\n",
    b"PG1 NOPE 1\n",
    b"PG1  GLQ 172.31.72.42:7401\n",
    b"PG1 SREP S2 07 -\n",
    b"PG1 SREP S2 7 1.2.3.4:1,,1.2.3.5:1\n",
    b"PG1 SREP S2 7 - Bad\n",
    b"PG1 GLQ 172.31.72.42:7401\nPG1 GLQ 172.31.72.42:7401\n",
    b"\xff\xfe\n",
    b"",
    b"PG1 GLQ 172.31.72.42:7401\r\n",
])
def test_rejects(data):
    with pytest.raises(MalformedMessage):
        decode(data)


def test_oversize_rejected_before_send():
    many = tuple(Endpoint(f"10.0.{i // 250}.{i % 250}", 7401) for i in range(100))
    with pytest.raises(OversizeMessage):
        encode(UnderloadedGossip("D1", many))


def test_fit_list_truncates_to_longest_prefix():
    many = tuple(Endpoint(f"10.0.{i // 250}.{i % 250}", 7401) for i in range(100))
    m = fit_list(lambda items: UnderloadedGossip("D1", items), many)
    assert len(encode(m)) <= MAX_DATAGRAM
    assert m.nodes == many[: len(m.nodes)]
    longer = UnderloadedGossip("D1", many[: len(m.nodes) + 1])
    with pytest.raises(OversizeMessage):
        encode(longer)


def test_port_classes():
    assert LoadStatus.PORT is PortClass.LOAD
    assert {GlQuery.PORT, GlReply.PORT, GlOfDomainQuery.PORT, GlOfDomainReply.PORT} == {PortClass.LEADER}
    assert {UnderloadedGossip.PORT, ExtUnderloadedQuery.PORT, ExtUnderloadedReply.PORT} == {PortClass.BALANCE}
    assert {OwnServices.PORT, ServiceQuery.PORT, ServiceFwd.PORT, ServiceReply.PORT} == {PortClass.SERVICE}


@given(st.binary(max_size=200))
def test_decode_never_crashes_on_bytes(data):
    try:
        decode(data)
    except MalformedMessage:
        pass


@given(messages, st.integers(0, 200), st.integers(0, 255))
def test_single_byte_corruption_is_rejected_or_valid(m, pos, byte):
    data = bytearray(encode(m))
    data[pos % len(data)] = byte
    try:
        again = decode(bytes(data))
    except MalformedMessage:
        return
    assert encode(again) == bytes(data)
