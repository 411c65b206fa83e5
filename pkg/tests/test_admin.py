import pytest
from hypothesis import given
from hypothesis import strategies as st

from pgrid.admin import EXT_SAMPLE_SIZE, Admin, DuplicateEndpoint, Topology, UnknownNode, assign_domains
from pgrid.model import Endpoint, ModelError

from nodeutil import ep

N1, N2 = Endpoint("172.31.72.42", 7401), Endpoint("172.31.72.43", 7401)
N3, N4 = Endpoint("172.31.77.41", 7401), Endpoint("172.31.77.47", 7401)


def four_node_topology():
    triples = [(N1, N2, 1), (N3, N4, 1)] + [(a, b, 4) for a in (N1, N2) for b in (N3, N4)]
    return Topology.from_triples([N1, N2, N3, N4], triples)


def test_two_nodes():
    close = Topology.from_triples([ep(1), ep(2)], [(ep(1), ep(2), 1)])
    far = Topology.from_triples([ep(1), ep(2)], [(ep(1), ep(2), 5)])
    assert set(assign_domains(close, 2).values()) == {"D1"}
    assert assign_domains(far, 2) == {ep(1): "D1", ep(2): "D2"}


def test_four_node_grouping():
    a = assign_domains(four_node_topology(), 3)
    assert a[N1] == a[N2] != a[N3] == a[N4]


def test_threshold_one_isolates_everyone():
    assert len(set(assign_domains(four_node_topology(), 1).values())) == 4


def test_topology_validation():
    with pytest.raises(DuplicateEndpoint):
        Topology.from_triples([ep(1), ep(1)], [])
    with pytest.raises(ModelError):
        Topology.from_triples([ep(1), ep(2)], [])
    with pytest.raises(ModelError):
        Topology.from_triples([ep(1), ep(2)], [(ep(1), ep(2), 1), (ep(2), ep(1), 2)])
    with pytest.raises(ModelError):
        assign_domains(four_node_topology(), 0)
    assert four_node_topology().hop(N1, N1) == 0


class TestAdmit:
    def test_first_node(self):
        adm = Admin.for_topology(four_node_topology(), 3)
        first = adm.admit_node(N1)
        assert first.tables.local_domain_members == set() and first.tables.external_nodes_list == {}
        assert first.notices == []

    def test_four_node_node3(self):
        adm = Admin.for_topology(four_node_topology(), 3)
        for n in (N1, N2, N4):
            adm.admit_node(n)
        t = adm.admit_node(N3).tables
        assert t.local_domain_members == {N4}
        assert t.external_nodes_list == {"D1": {N1, N2}}

    def test_cardinalities_in_three_domain_grid(self):
        nodes = [ep(i) for i in range(1, 13)]
        triples = [(a, b, 1 if i % 3 == j % 3 else 5) for i, a in enumerate(nodes) for j, b in enumerate(nodes) if i < j]
        adm = Admin.for_topology(Topology.from_triples(nodes, triples), 2)
        newcomer = nodes[-1]
        for n in nodes[:-1]:
            adm.admit_node(n)
        t = adm.admit_node(newcomer).tables
        assert len(t.local_domain_members) == 3
        assert len(t.external_nodes_list) == 2
        assert all(len(v) <= EXT_SAMPLE_SIZE for v in t.external_nodes_list.values())

    def test_errors(self):
        adm = Admin.for_topology(four_node_topology(), 3)
        adm.admit_node(N1)
        with pytest.raises(DuplicateEndpoint):
            adm.admit_node(N1)
        with pytest.raises(UnknownNode):
            adm.admit_node(ep(99))


hops = st.integers(1, 6)


@st.composite
def topologies(draw):
    n = draw(st.integers(1, 12))
    nodes = [ep(i) for i in range(1, n + 1)]
    triples = [(a, b, draw(hops)) for i, a in enumerate(nodes) for b in nodes[i + 1:]]
    return Topology.from_triples(nodes, triples), draw(st.integers(1, 7))


@given(topologies())
def test_partition_and_diameter(data):
    topo, threshold = data
    a = assign_domains(topo, threshold)
    assert set(a) == set(topo.nodes)
    by_domain = {}
    for node, d in a.items():
        by_domain.setdefault(d, []).append(node)
    for members in by_domain.values():
        for i, x in enumerate(members):
            for y in members[i + 1:]:
                assert topo.hop(x, y) < threshold
    assert assign_domains(topo, threshold) == a


@given(topologies(), st.randoms(use_true_random=False))
def test_admission_consistency(data, rnd):
    topo, threshold = data
    adm = Admin.for_topology(topo, threshold)
    order = list(topo.nodes)
    rnd.shuffle(order)
    tables = {}
    for node in order:
        admission = adm.admit_node(node)
        tables[node] = admission.tables
        for dst, notice in admission.notices:
            if notice.domain == tables[dst].domain:
                tables[dst].add_member(notice.node)
            else:
                tables[dst].add_external(notice.domain, notice.node, EXT_SAMPLE_SIZE)
    for node, t in tables.items():
        domain = adm.assignment[node]
        assert t.local_domain_members == {m for m, d in adm.assignment.items() if d == domain} - {node}
        foreign = {d for d in adm.assignment.values() if d != domain}
        assert set(t.external_nodes_list) == foreign
        for d, eps in t.external_nodes_list.items():
            assert 1 <= len(eps) <= EXT_SAMPLE_SIZE and all(adm.assignment[e] == d for e in eps)
