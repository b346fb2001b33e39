from __future__ import annotations

from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from loomnet.netmodel import FluidNetwork, Host, Topology
from loomnet.transport import SimFabric, TransportError, connect_mesh
from loomnet.transport.base import BufferOverflowError, Matcher

from oracles import solo_flow_us

GiB = 1 << 30


def fabric(n=2, gbps=100.0, lat=0.0, limit=None):
    net = FluidNetwork(Topology(tuple(Host(i, gbps, lat) for i in range(n))))
    return SimFabric(net, n) if limit is None else SimFabric(net, n, unexpected_limit=limit)


def test_connect_mesh_shares_network():
    fab = fabric(4)
    eps = [connect_mesh(r, fab) for r in range(4)]
    assert {ep.fabric.network for ep in eps} == {fab.network}
    assert eps[2].peers == frozenset({0, 1, 3})


def test_zero_byte_send():
    fab = fabric()
    a, b = fab.endpoints()
    h = a.post_send(1, 0, 1)
    r = b.post_recv(0, 0, 1)
    fab.loop.run()
    assert [c.handle for c in a.poll()] == [h] and [c.handle for c in b.poll()] == [r]


def test_one_gib_send_timing():
    fab = fabric(2, 100.0, 2.5)
    a, b = fab.endpoints()
    a.post_send(1, GiB, 9)
    b.post_recv(0, GiB, 9)
    fab.loop.run()
    (c,) = a.poll()
    assert c.timestamp_us == pytest.approx(solo_flow_us(5.0, GiB, 100.0))
    assert c.timestamp_us / 1e3 == pytest.approx(85.90, abs=0.01)


def test_send_to_unconnected_rank():
    a = fabric().endpoint(0)
    with pytest.raises(TransportError):
        a.post_send(5, 10, 0)
    with pytest.raises(TransportError):
        a.post_send(0, 10, 0)


def test_duplicate_tag_in_flight():
    a = fabric().endpoint(0)
    a.post_send(1, 10, 3)
    with pytest.raises(TransportError, match="already in flight"):
        a.post_send(1, 10, 3)


def test_matching_pair_and_early_frame():
    fab = fabric()
    a, b = fab.endpoints()
    a.post_send(1, 512, 1)
    fab.loop.run()
    h = b.post_recv(0, 512, 1)  # frame already waiting
    (c,) = b.poll()
    assert c.handle == h and c.ok and c.nbytes == 512


def test_recv_completes_at_post_time_if_later():
    fab = fabric(2, 1.0)
    a, b = fab.endpoints()
    a.post_send(1, 1000, 1)
    fab.loop.run()
    assert fab.loop.now == 8.0
    fab.loop.call_at(20.0, lambda: b.post_recv(0, 1000, 1))
    fab.loop.run()
    assert b.poll()[0].timestamp_us == 20.0


def test_length_mismatch_names_tag():
    fab = fabric()
    a, b = fab.endpoints()
    b.post_recv(0, 512, 77)
    a.post_send(1, 256, 77)
    fab.loop.run()
    (c,) = b.poll()
    assert not c.ok and "length mismatch" in c.error and "77" in c.error


def test_poll_without_traffic():
    assert fabric().endpoint(0).poll() == []


def test_per_peer_tag_order():
    fab = fabric(3)
    a, b, c = fab.endpoints()
    r1 = b.post_recv(0, 100, 5)
    r2 = c.post_recv(0, 100, 5)
    a.post_send(1, 100, 5)
    a.post_send(2, 100, 5)
    fab.loop.run()
    assert [x.handle for x in b.poll()] == [r1] and [x.handle for x in c.poll()] == [r2]


def test_unexpected_overflow_is_fatal():
    fab = fabric(limit=1000)
    a, b = fab.endpoints()
    a.post_send(1, 600, 1)
    a.post_send(1, 600, 2)
    fab.loop.run()
    fatal = [c for c in b.poll() if c.op == "fatal"]
    assert len(fatal) == 1 and "exceeds" in fatal[0].error


def test_matcher_fifo_and_overflow():
    m = Matcher(unexpected_limit=10)
    assert m.arrive(1, 2, 4, b"aaaa") is None
    assert m.arrive(1, 2, 4, b"bbbb") is None
    with pytest.raises(BufferOverflowError):
        m.arrive(1, 3, 4, None)
    assert m.post(100, 1, 2, 4) == (4, b"aaaa")
    assert m.post(101, 1, 2, 4) == (4, b"bbbb")
    assert m.post(102, 1, 2, 4) is None
    assert m.arrive(1, 2, 4, None) == (102, 4)


@st.composite
def message_sets(draw, n=3):
    msgs = []
    used = set()
    for _ in range(draw(st.integers(1, 12))):
        s = draw(st.integers(0, n - 1))
        d = draw(st.integers(0, n - 2))
        d = d if d < s else d + 1
        tag = draw(st.integers(0, 5))
        if (s, d, tag) in used:
            continue
        used.add((s, d, tag))
        msgs.append((s, d, tag, draw(st.integers(0, 4000)), draw(st.booleans())))
    return msgs


def run_sim_schedule(msgs, n=3):
    fab = fabric(n, 1.0, 0.5)
    eps = fab.endpoints()
    handles = Counter()
    for s, d, tag, nbytes, recv_first in msgs:
        if recv_first:
            handles[eps[d].post_recv(s, nbytes, tag), d] += 1
    for s, d, tag, nbytes, _ in msgs:
        handles[eps[s].post_send(d, nbytes, tag), s] += 1
    fab.loop.run()
    for s, d, tag, nbytes, recv_first in msgs:
        if not recv_first:
            handles[eps[d].post_recv(s, nbytes, tag), d] += 1
    out = []
    for ep in eps:
        out.extend((ep.rank, c) for c in ep.poll())
    return handles, out


@given(message_sets())
def test_exactly_once_completion(msgs):
    handles, out = run_sim_schedule(msgs)
    seen = Counter((c.handle, r) for r, c in out)
    assert seen == handles
    assert all(c.ok for _, c in out)
