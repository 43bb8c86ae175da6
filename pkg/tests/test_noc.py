import itertools

import pytest
from hypothesis import given, settings, strategies as st

from espsim.config import MessageClass as M, NocParams, Port, hops, step
from espsim.noc import Noc, Packet, PlaneMismatch, route_lookahead


def packet(src, dst, cls=M.DMA_RSP, flits=1, tag=0):
    return Packet(src, dst, cls, [tag] * (flits - 1))


def run_until_ejected(noc, dst, plane, limit=10_000):
    for _ in range(limit):
        if noc.peek_ejected(dst, plane) is not None:
            return noc.pop_ejected(dst, plane)
        noc.step()
    raise AssertionError("packet never ejected")


class LinkRecorder:
    def __init__(self):
        self.events = []

    def link(self, cycle, router, plane, port, kind, src, dst):
        self.events.append((cycle, router, plane, port, kind, src, dst))


def test_route_lookahead_examples():
    assert route_lookahead((2, 0), (0, 0)) == Port.N
    assert route_lookahead((0, 1), (2, 2)) == Port.E
    assert route_lookahead((1, 1), (1, 1)) == Port.LOCAL


@pytest.mark.parametrize("flits", [1, 2, 5])
def test_zero_load_latency_3x3(flits):
    cells = [(r, c) for r in range(3) for c in range(3)]
    for src, dst in itertools.product(cells, cells):
        noc = Noc(3, 3)
        p = packet(src, dst, flits=flits)
        noc.inject_packet(src, p)
        assert run_until_ejected(noc, dst, 6) is p
        assert p.latency == hops(src, dst) + flits - 1


def test_packet_length_counts_header_flit():
    params = NocParams()
    assert params.flits_for_words(0) == 1
    assert params.flits_for_words(16) == 17
    assert NocParams(flit_width_bits=128).flits_for_words(16) == 9


def test_wrong_plane_rejected():
    noc = Noc(2, 2)
    p = packet((0, 0), (1, 1), cls=M.DMA_REQ)
    p.plane = 3
    with pytest.raises(PlaneMismatch):
        noc.inject_packet((0, 0), p)


def test_irq_packet_travels_on_plane_5():
    noc = Noc(3, 3)
    p = packet((0, 1), (1, 1), cls=M.IO_IRQ)
    noc.inject_packet((0, 1), p)
    assert p.plane == 5
    assert run_until_ejected(noc, (1, 1), 5) is p


def test_contending_heads_wait_for_winner_tail():
    noc = Noc(3, 3)
    a = packet((1, 0), (1, 2), flits=4)
    b = packet((1, 1), (1, 2), flits=4)
    noc.inject_packet((1, 0), a)
    noc.step()
    noc.inject_packet((1, 1), b)
    while noc.pending_packets() < 2:
        noc.step()
    assert a.latency == hops(a.src, a.dst) + 3
    # loser's head leaves the cycle after the winner's tail, then streams behind it
    assert b.eject_cycle == a.eject_cycle + b.length_flits


def test_round_robin_alternates_under_sustained_contention():
    noc = Noc(3, 3)
    for i in range(4):
        noc.inject_packet((1, 0), packet((1, 0), (1, 2), flits=4, tag=i))
        noc.inject_packet((1, 1), packet((1, 1), (1, 2), flits=4, tag=i))
    order = []
    while len(order) < 8:
        noc.step()
        order += [p.src for p in noc.drain_ejected((1, 2))]
    assert all(x != y for x, y in zip(order, order[1:]))


def test_injection_stalls_while_local_queue_full():
    noc = Noc(1, 3)
    big = packet((0, 0), (0, 2), flits=17)
    small = packet((0, 0), (0, 2), flits=1)
    noc.inject_packet((0, 0), big)
    assert not noc.can_accept((0, 0), 6)
    noc.inject_packet((0, 0), small)
    while noc.pending_packets() < 2:
        noc.step()
    got = noc.drain_ejected((0, 2))
    assert got == [big, small]
    assert small.eject_cycle == big.eject_cycle + 1


def test_backpressure_from_full_ejection_queue_never_drops():
    params = NocParams(eject_queue_packets=2)
    noc = Noc(1, 2, params)
    sent = [packet((0, 0), (0, 1), flits=3, tag=i) for i in range(6)]
    for p in sent:
        noc.inject_packet((0, 0), p)
    for _ in range(50):
        noc.step()
    assert noc.pending_packets() == 2
    assert noc.stats.stalls > 0
    got = []
    while len(got) < len(sent):
        got += noc.drain_ejected((0, 1))
        noc.step()
    assert got == sent
    assert noc.idle()


def test_same_cycle_ejections_returned_in_plane_order():
    noc = Noc(2, 2)
    p3 = packet((0, 0), (1, 1), cls=M.COH_RSP)
    p1 = packet((0, 0), (1, 1), cls=M.COH_REQ)
    noc.inject_packet((0, 0), p3)
    noc.inject_packet((0, 0), p1)
    while noc.pending_packets() < 2:
        noc.step()
    assert p1.eject_cycle == p3.eject_cycle
    assert noc.drain_ejected((1, 1)) == [p1, p3]
    assert noc.drain_ejected((1, 1)) == []


def test_interleaved_planes_reassemble():
    noc = Noc(3, 3)
    a = Packet((0, 0), (2, 2), M.DMA_REQ, list(range(10)))
    b = Packet((0, 0), (2, 2), M.DMA_RSP, list(range(100, 110)))
    noc.inject_packet((0, 0), a)
    noc.inject_packet((0, 0), b)
    while noc.pending_packets() < 2:
        noc.step()
    assert a.eject_cycle == b.eject_cycle == hops((0, 0), (2, 2)) + 10
    assert a.payload_words == list(range(10))
    assert b.payload_words == list(range(100, 110))


def test_path_matches_xy_walk():
    rec = LinkRecorder()
    noc = Noc(4, 4, trace=rec)
    cells = [(r, c) for r in range(4) for c in range(4)]
    for src, dst in itertools.product(cells, cells):
        rec.events.clear()
        noc.inject_packet(src, packet(src, dst))
        run_until_ejected(noc, dst, 6)
        hopped = [(e[1], e[3]) for e in rec.events]
        expected, pos = [], src
        while True:
            port = Port.E if dst[1] > pos[1] else Port.W if dst[1] < pos[1] else \
                Port.S if dst[0] > pos[0] else Port.N if dst[0] < pos[0] else Port.LOCAL
            expected.append((pos, port.name))
            if port == Port.LOCAL:
                break
            pos = step(pos, port)
        assert hopped == expected


def test_one_hop_per_cycle_in_trace():
    rec = LinkRecorder()
    noc = Noc(3, 3, trace=rec)
    noc.inject_packet((0, 0), packet((0, 0), (2, 2), flits=3))
    run_until_ejected(noc, (2, 2), 6)
    heads = [e[0] for e in rec.events if e[4] == "head"]
    assert heads == list(range(heads[0], heads[0] + len(heads)))


def _plane5_latencies(background):
    noc = Noc(3, 3)
    probes, cycle = [], 0
    cells = [(r, c) for r in range(3) for c in range(3)]
    pairs = [(s, d) for s, d in itertools.product(cells, cells) if s != d]
    for k in range(100):
        if background:
            for s in cells:
                for cls in (M.DMA_REQ, M.DMA_RSP):
                    if noc.can_accept(s, noc.plane_for(cls)):
                        d = cells[(cells.index(s) + 4 + k) % 9]
                        if d != s:
                            noc.inject_packet(s, Packet(s, d, cls, [0] * 16))
        src, dst = pairs[(7 * k) % len(pairs)]
        p = packet(src, dst, cls=M.IO_IRQ)
        noc.inject_packet(src, p)
        probes.append(p)
        for _ in range(3):
            noc.step()
            for c in cells:
                noc.drain_ejected(c)
            cycle += 1
    while not noc.idle():
        noc.step()
        for c in cells:
            noc.drain_ejected(c)
    return [p.latency for p in probes], noc.stats


def test_plane_isolation_under_background_traffic():
    quiet, _ = _plane5_latencies(False)
    busy, stats = _plane5_latencies(True)
    assert stats.injected_flits.get(4, 0) > 1000 and stats.stalls > 0
    assert busy == quiet


def test_fifo_order_per_pair_and_plane():
    noc = Noc(3, 3)
    sent = [packet((0, 0), (2, 1), flits=1 + i % 4, tag=i) for i in range(12)]
    other = [packet((2, 0), (2, 1), flits=3, tag=i) for i in range(12)]
    for p, q in zip(sent, other):
        noc.inject_packet((0, 0), p)
        noc.inject_packet((2, 0), q)
    got = []
    while not noc.idle():
        noc.step()
        got += noc.drain_ejected((2, 1))
    assert [p for p in got if p.src == (0, 0)] == sent
    assert [p for p in got if p.src == (2, 0)] == other


def test_idle_step_is_noop():
    noc = Noc(2, 2)
    assert noc.idle()
    assert noc.step() == 0
    assert noc.idle() and noc.stats.flit_moves == 0


traffic = st.lists(
    st.tuples(st.integers(0, 8), st.integers(0, 8), st.sampled_from(list(M)),
              st.integers(0, 20), st.integers(0, 6)),
    min_size=1, max_size=40)


@settings(max_examples=60, deadline=None)
@given(traffic, st.integers(1, 4), st.integers(1, 3))
def test_random_traffic_delivered_and_conserved(items, depth, eject_cap):
    noc = Noc(3, 3, NocParams(input_queue_depth_flits=depth, eject_queue_packets=eject_cap))
    schedule = {}
    for s, d, cls, words, delay in items:
        schedule.setdefault(delay, []).append(Packet(divmod(s, 3), divmod(d, 3), cls,
                                                     list(range(words))))
    sent, got = [], []
    for cycle in range(10_000):
        for p in schedule.get(cycle, ()):
            noc.inject_packet(p.src, p)
            sent.append(p)
        noc.step()
        for r in range(3):
            for c in range(3):
                for p in noc.drain_ejected((r, c)):
                    assert p.dst == (r, c)
                    got.append(p)
        if cycle > 6 and noc.idle():
            break
    assert noc.idle()
    assert sorted(p.id for p in got) == sorted(p.id for p in sent)
    s = noc.stats
    assert s.injected_flits == s.ejected_flits
    assert s.injected_packets == s.ejected_packets
    for p in got:
        assert p.latency >= hops(p.src, p.dst) + p.length_flits - 1
    order = {p.id: i for i, p in enumerate(sent)}
    by_pair = {}
    for p in got:
        by_pair.setdefault((p.src, p.dst, p.plane), []).append(order[p.id])
    for seq in by_pair.values():
        assert seq == sorted(seq)
