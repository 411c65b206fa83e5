import copy

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pgrid.effects import Note, Send, StartTimer, StopTimer
from pgrid.model import LoadClass, LoadSample
from pgrid.node import Claim, NodeConfig, Role
from pgrid.protocol import (
    GlOfDomainQuery,
    GlOfDomainReply,
    GlQuery,
    GlReply,
    LoadStatus,
    UnderloadedGossip,
)

from nodeutil import ep, make_leader, make_node, sends, timers

A, B, C, D, E = (ep(i) for i in range(1, 6))


class TestStart:
    def test_single_node_domain_self_elects(self):
        n = make_node(A)
        out = n.on_start(0.0)
        assert sends(out) == []
        assert n.role is Role.LEADER and n.epoch == 1 and n.my_leader == A

    def test_joins_existing_leader(self):
        b = make_node(B, members=[A])
        make_leader(b)
        a = make_node(A, members=[B])
        out = a.on_start(0.0)
        assert [s.dest for s in sends(out, GlQuery)] == [B]
        assert timers(out)["election"] == a.config.gl_election_timeout
        replies = b.on_message(sends(out, GlQuery)[0].message, 0.1)
        assert len(sends(replies, GlReply)) == 1
        a.on_message(sends(replies)[0].message, 0.2)
        assert a.my_leader == B and a.role is Role.MEMBER
        assert a.on_timer("election", 5.0) == []

    def test_election_timeout_queries_every_external_endpoint(self):
        ext = {"D2": [ep(10), ep(11)], "D3": [ep(12), ep(13)], "D4": [ep(14), ep(15)]}
        n = make_node(A, members=[B], external=ext)
        n.on_start(0.0)
        out = n.on_timer("election", 5.0)
        assert n.role is Role.LEADER and n.epoch == 1
        assert len(sends(out, GlOfDomainQuery)) == 6
        assert StopTimer("election") in out

    def test_reply_before_timeout_makes_timeout_noop(self):
        n = make_node(A, members=[B])
        n.on_start(0.0)
        n.on_message(GlReply(B, "D1", 1, 1.0), 1.0)
        assert n.on_timer("election", 5.0) == []
        assert n.role is Role.MEMBER


def _run_all_interleavings(nodes):
    """Explore every delivery order of in-flight messages and election timers.

    Per-pair FIFO is kept; a timer may fire at any point while armed.  Returns
    the final (leader set, views) of every maximal schedule.
    """
    finals = set()

    def apply(state, owner, effects):
        nodes, inflight, armed = state
        for e in effects:
            if isinstance(e, Send):
                inflight.setdefault((owner, e.dest), []).append(e.message)
            elif isinstance(e, StartTimer) and e.name == "election":
                armed.add(owner)
            elif isinstance(e, StopTimer) and e.name == "election":
                armed.discard(owner)

    def explore(state, depth):
        nodes, inflight, armed = state
        moves = [("msg", pair) for pair in sorted(inflight, key=lambda p: (p[0].sort_key, p[1].sort_key)) if inflight[pair]]
        moves += [("timer", e) for e in sorted(armed)]
        if not moves or depth > 30:
            leaders = frozenset(e for e, n in nodes.items() if n.role is Role.LEADER)
            views = frozenset((e, n.my_leader) for e, n in nodes.items())
            finals.add((leaders, views))
            return
        for kind, key in moves:
            nxt = copy.deepcopy(state)
            n2, infl2, armed2 = nxt
            if kind == "msg":
                src, dst = key
                m = infl2[key].pop(0)
                if not infl2[key]:
                    del infl2[key]
                apply(nxt, dst, n2[dst].on_message(m, 1.0))
            else:
                armed2.discard(key)
                apply(nxt, key, n2[key].on_timer("election", 1.0))
            explore(nxt, depth + 1)

    state = (nodes, {}, set())
    for e in sorted(nodes):
        apply(state, e, nodes[e].on_start(0.0))
    explore(state, 0)
    return finals


@pytest.mark.parametrize("scores", [(1.0, 1.0), (7.0, 10.0), (10.0, 7.0)])
def test_two_node_simultaneous_start_all_interleavings(scores):
    nodes = {A: make_node(A, members=[B], score=scores[0]), B: make_node(B, members=[A], score=scores[1])}
    finals = _run_all_interleavings(nodes)
    assert len(finals) > 1  # there really are several schedules
    for leaders, views in finals:
        assert len(leaders) == 1
        (leader,) = leaders
        assert all(view == leader for _, view in views)


class TestConflict:
    def test_higher_score_wins(self):
        n = make_node(ep(42), members=[ep(43)], score=7.0)
        make_leader(n)
        out = n.on_message(GlReply(ep(43), "D1", 1, 10.0), 1.0)
        assert n.role is Role.MEMBER and n.my_leader == ep(43)
        assert any(isinstance(e, Note) and e.event == "abdicated" for e in out)

    def test_higher_epoch_retains(self):
        n = make_node(A, members=[B])
        make_leader(n)
        n.epoch_floor = 1
        make_leader(n)
        assert n.epoch == 2
        out = n.on_message(GlReply(B, "D1", 1, 99.0), 1.0)
        assert n.role is Role.LEADER
        # the loser is told directly
        assert [(s.dest, s.message.epoch) for s in sends(out, GlReply)] == [(B, 2)]

    def test_tie_goes_to_smaller_endpoint(self):
        me = ep(42)
        n = make_node(me, members=[ep(43)], score=5.0)
        make_leader(n)
        n.on_message(GlReply(ep(43), "D1", 1, 5.0), 1.0)
        assert n.role is Role.LEADER

    def test_claim_order(self):
        assert Claim(2, 0.0, B).beats(Claim(1, 9.0, A))
        assert Claim(1, 9.0, B).beats(Claim(1, 1.0, A))
        assert Claim(1, 1.0, A).beats(Claim(1, 1.0, B))


class TestGlQuery:
    def test_leader_answers(self):
        n = make_node(A, members=[B])
        make_leader(n)
        out = n.on_message(GlQuery(B), 1.0)
        assert [(s.dest, s.message.leader) for s in sends(out)] == [(B, A)]

    def test_member_with_known_leader_is_silent(self):
        # members never relay a leader's claim: stale relays kept dead leaders alive
        n = make_node(A, members=[B, C])
        n.on_start(0.0)
        n.on_message(GlReply(B, "D1", 1, 1.0), 0.5)
        assert n.on_message(GlQuery(C), 1.0) == []

    def test_member_without_leader_is_silent(self):
        n = make_node(A, members=[B])
        n.on_start(0.0)
        assert n.on_message(GlQuery(B), 1.0) == []


class TestStatus:
    def test_unchanged_class_sends_nothing(self):
        n = make_node(A, members=[B, C])
        assert sends(n.on_status_tick(LoadSample(0.5, 0.7), 1.0)) == []

    def test_change_broadcasts_to_domain(self):
        n = make_node(A, members=[B, C, D, E])
        out = n.on_status_tick(LoadSample(0.1, 0.1), 1.0)
        msgs = sends(out, LoadStatus)
        assert len(msgs) == 4 and {s.dest for s in msgs} == {B, C, D, E}
        assert msgs[0].message.load_class is LoadClass.UNDER_BOTH

    def test_alone_sends_nothing(self):
        n = make_node(A)
        assert sends(n.on_status_tick(LoadSample(0.1, 0.1), 1.0)) == []


class TestLoadStatus:
    def test_member_updates_silently(self):
        n = make_node(A, members=[B])
        out = n.on_message(LoadStatus(B, 0.1, 0.1, LoadClass.UNDER_BOTH), 1.0)
        assert out == [] and n.under_local.section_both == {B}

    def test_leader_gossips_to_each_foreign_leader_once(self):
        n = make_node(A, members=[B])
        make_leader(n)
        n.tables.other_group_leader_list.update({"D2": ep(20), "D3": ep(30), "D4": ep(40)})
        out = n.on_message(LoadStatus(B, 0.1, 0.1, LoadClass.UNDER_BOTH), 1.0)
        gossip = sends(out, UnderloadedGossip)
        assert sorted(s.dest for s in gossip) == [ep(20), ep(30), ep(40)]
        assert gossip[0].message.nodes == (B,)
        assert sends(n.on_message(LoadStatus(B, 0.1, 0.1, LoadClass.UNDER_BOTH), 2.0)) == []

    def test_unknown_sender_dropped(self):
        n = make_node(A, members=[B])
        assert n.on_message(LoadStatus(C, 0.1, 0.1, LoadClass.UNDER_BOTH), 1.0) == []
        assert n.counters["unknown_sender"] == 1 and len(n.under_local) == 0

    def test_gossip_sample_is_capped_by_fanout(self):
        others = [ep(i) for i in range(2, 9)]
        n = make_node(A, members=others, gossip_fanout_k=3)
        make_leader(n)
        n.tables.other_group_leader_list["D2"] = ep(20)
        for i, o in enumerate(others):
            out = n.on_message(LoadStatus(o, 0.1, 0.1, LoadClass.UNDER_BOTH), float(i))
        assert len(sends(out, UnderloadedGossip)[0].message.nodes) == 3


class TestRefresh:
    def test_leader_queries_external_endpoints(self):
        n = make_node(A, external={"D2": [ep(10), ep(11)], "D3": [ep(12), ep(13)]})
        make_leader(n)
        out = n.on_gl_refresh_tick(100.0)
        assert len(sends(out, GlOfDomainQuery)) == 4

    def test_empty_external_list(self):
        n = make_node(A)
        make_leader(n)
        assert sends(n.on_gl_refresh_tick(100.0)) == []

    def test_reply_updates_leader_table(self):
        n = make_node(A, external={"D2": [ep(10)]})
        make_leader(n)
        n.on_message(GlOfDomainReply("D2", ep(11), 1), 1.0)
        assert n.tables.other_group_leader_list == {"D2": ep(11)}
        n.on_message(GlOfDomainReply("D2", ep(12), 0), 2.0)  # older epoch is ignored
        assert n.tables.other_group_leader_list == {"D2": ep(11)}

    def test_member_without_heartbeat_probes_leader(self):
        n = make_node(A, members=[B])
        n.on_start(0.0)
        n.on_message(GlReply(B, "D1", 1, 1.0), 0.5)
        n.on_gl_refresh_tick(100.0)  # heartbeat flag consumed
        out = n.on_gl_refresh_tick(200.0)
        assert [s.dest for s in sends(out, GlQuery)] == [B]
        out = n.on_timer("leader_probe", 205.0)
        assert n.my_leader is None and n.electing
        assert sends(out, GlQuery)  # re-election queries the domain


class TestGossipReceipt:
    def test_replacement_not_union(self):
        n = make_node(A)
        make_leader(n)
        n.on_message(UnderloadedGossip("D2", (ep(10), ep(11))), 1.0)
        assert n.tables.external_under_loaded_list == {"D2": {ep(10), ep(11)}}
        n.on_message(UnderloadedGossip("D2", (ep(12),)), 2.0)
        assert n.tables.external_under_loaded_list == {"D2": {ep(12)}}

    def test_member_drops(self):
        n = make_node(A, members=[B])
        n.on_start(0.0)
        n.on_message(UnderloadedGossip("D2", (ep(10),)), 1.0)
        assert n.tables.external_under_loaded_list == {} and n.counters["not_leader"] == 1


claims = st.tuples(st.integers(0, 6), st.sampled_from([1.0, 2.0]), st.sampled_from([B, C, D]))


@given(st.lists(st.one_of(claims, st.just("probe_timeout")), max_size=30))
def test_accepted_epochs_never_decrease(events):
    n = make_node(A, members=[B, C, D])
    n.on_start(0.0)
    accepted = []
    for t, ev in enumerate(events):
        if ev == "probe_timeout":
            n.probe_leader()
            n.on_timer("leader_probe", float(t))
            continue
        epoch, score, leader = ev
        before = n.leader_claim
        n.on_message(GlReply(leader, "D1", epoch, score), float(t))
        if n.leader_claim is not None and n.leader_claim != before:
            accepted.append(n.leader_claim.epoch)
    assert accepted == sorted(accepted)


def test_config_validation():
    with pytest.raises(ValueError):
        NodeConfig(status_period=0)
    with pytest.raises(ValueError):
        NodeConfig(gossip_fanout_k=0)
    with pytest.raises(ValueError):
        NodeConfig.from_dict({"nope": 1})
    assert NodeConfig().ttl == 3 * NodeConfig().gl_refresh_period
