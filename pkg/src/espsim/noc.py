"""Cycle-level model of the multi-plane 2D-mesh NoC.

Each plane is an independent mesh of wormhole routers with one FIFO per
input port.  A head flit carries the output port it will take at the router
it currently sits in; when a router forwards the head it writes the port for
the next router (look-ahead routing), so a hop costs exactly one cycle.

``Noc.step`` runs one cycle in two phases: every router decides its moves
from the start-of-cycle state, then all moves are committed.  A flit is
transferred only when the downstream queue has room (valid and ready);
nothing is ever dropped.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from itertools import count
from typing import Any, Deque, Dict, List, Optional, Tuple

from .config import (MessageClass, NocParams, Port, Position, hops, plane_for_message, step,
                     xy_port)

PORTS = tuple(Port)


class PlaneMismatch(Exception):
    """A packet was injected on a plane other than the one its class uses."""


class FlitKind(str, Enum):
    HEAD = "head"
    BODY = "body"
    TAIL = "tail"
    HEAD_TAIL = "head_tail"

    @property
    def is_head(self) -> bool:
        return self in (FlitKind.HEAD, FlitKind.HEAD_TAIL)

    @property
    def is_tail(self) -> bool:
        return self in (FlitKind.TAIL, FlitKind.HEAD_TAIL)


_packet_ids = count()


@dataclass(eq=False)
class Packet:
    src: Position
    dst: Position
    msg_class: MessageClass
    payload_words: List[int] = field(default_factory=list)
    body: Any = None                 # header-encoded fields (opcode, address, ...)
    plane: Optional[int] = None
    length_flits: int = 0
    inject_cycle: int = -1
    eject_cycle: int = -1
    departed_cycle: int = -1         # cycle the tail flit left the tile proxy
    id: int = field(default_factory=lambda: next(_packet_ids))

    @property
    def latency(self) -> int:
        return self.eject_cycle - self.inject_cycle


@dataclass(eq=False, slots=True)
class Flit:
    plane: int
    kind: FlitKind
    packet: Packet
    seq: int
    port: Optional[Port]

    @property
    def src(self) -> Position:
        return self.packet.src

    @property
    def dst(self) -> Position:
        return self.packet.dst


def route_lookahead(current: Position, dst: Position) -> Port:
    """XY output port at ``current`` for a packet headed to ``dst``."""
    return xy_port(current, dst)


def packetize(pkt: Packet, n_flits: int) -> List[Flit]:
    if n_flits == 1:
        return [Flit(pkt.plane, FlitKind.HEAD_TAIL, pkt, 0, None)]
    flits = [Flit(pkt.plane, FlitKind.HEAD, pkt, 0, None)]
    flits += [Flit(pkt.plane, FlitKind.BODY, pkt, i, None) for i in range(1, n_flits - 1)]
    flits.append(Flit(pkt.plane, FlitKind.TAIL, pkt, n_flits - 1, None))
    return flits


@dataclass
class NocStats:
    injected_flits: Dict[int, int] = field(default_factory=dict)
    ejected_flits: Dict[int, int] = field(default_factory=dict)
    injected_packets: Dict[int, int] = field(default_factory=dict)
    ejected_packets: Dict[int, int] = field(default_factory=dict)
    link_flits: Dict[Tuple[Position, str, int], int] = field(default_factory=dict)
    stalls: int = 0
    flit_moves: int = 0


class Noc:
    """All planes of the mesh plus the tile-side injection/ejection queues.

    Planes are numbered from 1.  ``trace`` (optional) receives link events as
    ``trace.link(cycle, router, plane, port, kind, src, dst)``.
    """

    def __init__(self, rows: int, cols: int, params: NocParams = NocParams(), trace=None):
        self.rows, self.cols = rows, cols
        self.params = params
        self.depth = params.input_queue_depth_flits
        self.eject_cap = params.eject_queue_packets
        self.plane_map = params.plane_table
        self.planes = params.planes
        self.trace = trace
        self.cycle = 0
        self.stats = NocStats()
        n, P = rows * cols, params.planes + 1
        # indexed [router][plane][port]; plane 0 unused
        self.queues: List[List[List[Deque[Flit]]]] = [
            [[deque() for _ in PORTS] for _ in range(P)] for _ in range(n)]
        self.owner: List[List[List[Optional[int]]]] = [
            [[None] * 5 for _ in range(P)] for _ in range(n)]
        self.in_route: List[List[List[Optional[Port]]]] = [
            [[None] * 5 for _ in range(P)] for _ in range(n)]
        self.rr: List[List[List[int]]] = [[[0] * 5 for _ in range(P)] for _ in range(n)]
        self.backlog: List[List[Deque[Flit]]] = [[deque() for _ in range(P)] for _ in range(n)]
        self.eject_partial: List[List[int]] = [[0] * P for _ in range(n)]
        self.eject_done: List[List[Deque[Packet]]] = [[deque() for _ in range(P)] for _ in range(n)]
        self.occupancy: List[List[int]] = [[0] * P for _ in range(n)]
        self.active: set = set()
        self.backlogged: set = set()
        self.neighbor: List[Dict[Port, int]] = []
        for idx in range(n):
            pos = self.pos(idx)
            nb = {}
            for port in (Port.N, Port.E, Port.S, Port.W):
                r, c = step(pos, port)
                if 0 <= r < rows and 0 <= c < cols:
                    nb[port] = r * cols + c
            self.neighbor.append(nb)

    # -- addressing ---------------------------------------------------------
    def idx(self, pos: Position) -> int:
        return pos[0] * self.cols + pos[1]

    def pos(self, idx: int) -> Position:
        return divmod(idx, self.cols)

    # -- tile interface -----------------------------------------------------
    def plane_for(self, msg_class: MessageClass) -> int:
        return plane_for_message(msg_class, self.plane_map)

    def inject_packet(self, tile: Position, pkt: Packet) -> None:
        """Hand a packet to the tile-side proxy of ``tile``.

        Flits enter the local input queue as space allows; the remainder
        waits in the proxy and drains in later cycles.
        """
        expected = self.plane_for(pkt.msg_class)
        if pkt.plane is None:
            pkt.plane = expected
        elif pkt.plane != expected:
            raise PlaneMismatch(f"{pkt.msg_class.value} belongs on plane {expected}, "
                                f"not plane {pkt.plane}")
        if pkt.src != tile:
            pkt.src = tile
        pkt.length_flits = self.params.flits_for_words(len(pkt.payload_words))
        pkt.inject_cycle = self.cycle
        flits = packetize(pkt, pkt.length_flits)
        flits[0].port = route_lookahead(tile, pkt.dst)
        idx, plane = self.idx(tile), pkt.plane
        s = self.stats
        s.injected_flits[plane] = s.injected_flits.get(plane, 0) + len(flits)
        s.injected_packets[plane] = s.injected_packets.get(plane, 0) + 1
        self.backlog[idx][plane].extend(flits)
        self._refill(idx, plane)

    def can_accept(self, tile: Position, plane: int) -> bool:
        """True when the local input queue has room and no backlog is waiting."""
        idx = self.idx(tile)
        return (not self.backlog[idx][plane]
                and len(self.queues[idx][plane][Port.LOCAL]) < self.depth)

    def peek_ejected(self, tile: Position, plane: int) -> Optional[Packet]:
        q = self.eject_done[self.idx(tile)][plane]
        return q[0] if q else None

    def pop_ejected(self, tile: Position, plane: int) -> Packet:
        return self.eject_done[self.idx(tile)][plane].popleft()

    def drain_ejected(self, tile: Position) -> List[Packet]:
        """Remove and return all reassembled packets at ``tile``, plane order first."""
        idx = self.idx(tile)
        out: List[Packet] = []
        for plane in range(1, self.planes + 1):
            q = self.eject_done[idx][plane]
            while q:
                out.append(q.popleft())
        return out

    # -- bookkeeping --------------------------------------------------------
    def flits_in_flight(self) -> int:
        total = 0
        for idx, plane in self.active:
            total += self.occupancy[idx][plane]
        for idx, plane in self.backlogged:
            total += len(self.backlog[idx][plane])
        for row in self.eject_partial:
            total += sum(row)
        return total

    def pending_packets(self) -> int:
        return sum(len(q) for row in self.eject_done for q in row)

    def idle(self) -> bool:
        return not self.active and not self.backlogged and self.flits_in_flight() == 0 \
            and self.pending_packets() == 0

    def _refill(self, idx: int, plane: int) -> None:
        backlog = self.backlog[idx][plane]
        q = self.queues[idx][plane][Port.LOCAL]
        moved = False
        while backlog and len(q) < self.depth:
            flit = backlog.popleft()
            if flit.kind.is_tail:
                flit.packet.departed_cycle = self.cycle
            q.append(flit)
            moved = True
        if moved:
            self.occupancy[idx][plane] = sum(len(x) for x in self.queues[idx][plane])
            self.active.add((idx, plane))
        if backlog:
            self.backlogged.add((idx, plane))
        else:
            self.backlogged.discard((idx, plane))

    # -- the cycle ----------------------------------------------------------
    def _ready(self, idx: int, plane: int, out: Port, flit: Flit) -> bool:
        if out == Port.LOCAL:
            return not flit.kind.is_head or len(self.eject_done[idx][plane]) < self.eject_cap
        nb = self.neighbor[idx][out]
        return len(self.queues[nb][plane][out.opposite]) < self.depth

    def step(self) -> int:
        """Advance every router one cycle; returns the number of flits moved."""
        moves: List[Tuple[int, int, int, Port]] = []
        for idx, plane in sorted(self.active):
            queues = self.queues[idx][plane]
            owner = self.owner[idx][plane]
            in_route = self.in_route[idx][plane]
            rr = self.rr[idx][plane]
            for out in PORTS:
                o = owner[out]
                chosen = None
                if o is not None:
                    if queues[o]:
                        chosen = o
                else:
                    start = rr[out]
                    for k in range(5):
                        i = (start + k) % 5
                        q = queues[i]
                        if q and q[0].kind.is_head and q[0].port == out:
                            chosen = i
                            break
                if chosen is None:
                    continue
                flit = queues[chosen][0]
                if o is not None and in_route[chosen] != out:
                    continue
                if self._ready(idx, plane, out, flit):
                    moves.append((idx, plane, chosen, out))
                else:
                    self.stats.stalls += 1

        cycle = self.cycle
        touched = set()
        for idx, plane, i, out in moves:
            flit = self.queues[idx][plane][i].popleft()
            self.occupancy[idx][plane] -= 1
            touched.add((idx, plane))
            kind = flit.kind
            if kind == FlitKind.HEAD:
                self.owner[idx][plane][out] = i
                self.in_route[idx][plane][i] = out
                self.rr[idx][plane][out] = (i + 1) % 5
            elif kind == FlitKind.HEAD_TAIL:
                self.rr[idx][plane][out] = (i + 1) % 5
            if kind.is_tail:
                self.owner[idx][plane][out] = None
                self.in_route[idx][plane][i] = None
            pkt = flit.packet
            key = (self.pos(idx), out.name, plane)
            self.stats.link_flits[key] = self.stats.link_flits.get(key, 0) + 1
            if self.trace is not None:
                self.trace.link(cycle, self.pos(idx), plane, out.name, kind.value, pkt.src,
                                pkt.dst)
            if out == Port.LOCAL:
                self.eject_partial[idx][plane] += 1
                if kind.is_tail:
                    self.eject_partial[idx][plane] = 0
                    pkt.eject_cycle = cycle
                    self.eject_done[idx][plane].append(pkt)
                    s = self.stats
                    s.ejected_packets[plane] = s.ejected_packets.get(plane, 0) + 1
                    s.ejected_flits[plane] = s.ejected_flits.get(plane, 0) + pkt.length_flits
            else:
                nb = self.neighbor[idx][out]
                if kind.is_head:
                    flit.port = route_lookahead(self.pos(nb), pkt.dst)
                self.queues[nb][plane][out.opposite].append(flit)
                self.occupancy[nb][plane] += 1
                self.active.add((nb, plane))
        for key in touched:
            if self.occupancy[key[0]][key[1]] == 0:
                self.active.discard(key)
        self.stats.flit_moves += len(moves)
        self.cycle += 1
        for idx, plane in sorted(self.backlogged):
            self._refill(idx, plane)
        return len(moves)

    def zero_load_latency(self, src: Position, dst: Position, n_flits: int) -> int:
        return hops(src, dst) + n_flits - 1
