"""Tile sockets: proxies between tile devices and the NoC.

Every socket exposes the same per-cycle hooks, which the engine calls in a
fixed order across all tiles:

``deliver(pkt)``     offered the head ejected packet of a plane; False leaves
                     it queued (head-of-line blocking)
``proxy_step``       local work after ejection (processor sequencer, IRQs)
``cache_step``       moves L2/LLC output into the NoC and DRAM queues
``accel_step``       runs the accelerator engines
``dram_step``        retires DRAM accesses

Packets carry a small ``body`` dict whose ``kind`` selects the service.
Coherence packets carry the :class:`~espsim.coherence.CohMsg` itself.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass
from typing import Any, Deque, Dict, List, Optional, Tuple

from . import accelerator as accmod
from .accelerator import Accelerator, AcceleratorError
from .coherence import READ, WRITE, CohMsg, L2Cache, LlcDirectory, MshrFull
from .config import (WORD_BYTES, CoherenceMode, MessageClass, Position, TileKind,
                     ValidatedSoC)
from .noc import Packet
from .workload import Invocation, Op

# memory-tile register map (write-back + invalidate of an LLC range)
MEM_REG_BASE = 0x00
MEM_REG_LEN = 0x08
MEM_REG_TRIGGER = 0x10


class UnmappedAddress(Exception):
    code = "UnmappedAddress"


class AllocExhausted(Exception):
    code = "AllocExhausted"


# ---------------------------------------------------------------------------
# memory and DRAM


class PhysicalMemory:
    """Sparse word-addressed backing store; unwritten words read as 0."""

    def __init__(self):
        self.words: Dict[int, int] = {}

    def read(self, addr: int, n: int) -> List[int]:
        w = self.words
        return [w.get(addr + i * WORD_BYTES, 0) for i in range(n)]

    def write(self, addr: int, data) -> None:
        for i, v in enumerate(data):
            self.words[addr + i * WORD_BYTES] = v


@dataclass
class _DramOp:
    op: str
    addr: int
    words: int
    data: Optional[List[int]]
    token: Any
    done_at: int


class DramChannel:
    """FIFO DRAM channel: fixed latency plus serialization at ``bandwidth`` words/cycle.

    A request arriving at ``t`` starts at ``max(t, bus_free)``, occupies the
    bus for ``ceil(words/bandwidth)`` cycles and completes ``latency`` cycles
    after it started plus its own serialization.
    """

    def __init__(self, latency: int = 30, bandwidth_words: int = 1,
                 memory: Optional[PhysicalMemory] = None):
        self.latency = latency
        self.bandwidth = bandwidth_words
        self.memory = memory if memory is not None else PhysicalMemory()
        self.queue: Deque[_DramOp] = deque()
        self.bus_free = 0
        self.busy_cycles = 0
        self.depth_sum = 0
        self.samples = 0
        self.completed = 0
        self.words_read = 0
        self.words_written = 0

    def submit(self, now: int, op: str, addr: int, words: int, data=None, token=None) -> int:
        ser = -(-words // self.bandwidth)
        start = max(now, self.bus_free)
        self.bus_free = start + ser
        self.busy_cycles += ser
        done = start + self.latency + ser
        self.queue.append(_DramOp(op, addr, words, None if data is None else list(data),
                                  token, done))
        return done

    def cycle(self, now: int) -> List[Tuple[Any, Optional[List[int]]]]:
        self.depth_sum += len(self.queue)
        self.samples += 1
        out = []
        while self.queue and self.queue[0].done_at <= now:
            r = self.queue.popleft()
            self.completed += 1
            if r.op == WRITE:
                self.memory.write(r.addr, r.data)
                self.words_written += r.words
                out.append((r.token, None))
            else:
                self.words_read += r.words
                out.append((r.token, self.memory.read(r.addr, r.words)))
        return out

    @property
    def idle(self) -> bool:
        return not self.queue

    @property
    def mean_queue_depth(self) -> float:
        return self.depth_sum / self.samples if self.samples else 0.0


# ---------------------------------------------------------------------------
# proxies


@dataclass
class LocalRequest:
    """A request as seen on the tile-local bus before translation."""
    kind: str                    # load, store, reg_read, reg_write, dma_read, dma_write
    addr: int
    words: int = 1
    data: Tuple[int, ...] = ()
    tag: Any = None
    mode: Optional[CoherenceMode] = None


def master_proxy_translate(vsoc: ValidatedSoC, src: Position, req: LocalRequest) -> Packet:
    """Turn a local bus request into the NoC packet that serves it."""
    mmap = vsoc.memory_map
    if req.kind in ("reg_read", "reg_write"):
        owner = mmap.aperture_owner(req.addr)
        if owner is None:
            raise UnmappedAddress(f"{req.addr:#x}")
        tile, offset = owner
        body = {"kind": req.kind, "offset": offset, "tag": req.tag}
        if req.kind == "reg_write":
            body["value"] = req.data[0]
        return Packet(src, tile, MessageClass.IO_IRQ, [], body)
    tile = mmap.memory_tile_for(req.addr)
    if tile is None:
        raise UnmappedAddress(f"{req.addr:#x}")
    if req.kind in ("load", "store"):
        line = req.addr // vsoc.config.cache.line_size_bytes
        kind = "GetS" if req.kind == "load" else "GetM"
        return coh_packet(CohMsg(kind, line, src, tile))
    if req.kind in ("dma_read", "dma_write"):
        rw = READ if req.kind == "dma_read" else WRITE
        body = {"kind": "dma_req", "rw": rw, "addr": req.addr, "words": req.words,
                "mode": req.mode, "tag": req.tag}
        return Packet(src, tile, MessageClass.DMA_REQ, list(req.data) if rw == WRITE else [],
                      body)
    raise ValueError(f"unknown request kind {req.kind!r}")


def local_shortcut(socket: "Socket", req: LocalRequest) -> Optional[Any]:
    """Serve a request aimed at the issuing tile itself without touching the NoC.

    Returns the response body, or None when the request is not local.
    """
    if req.kind not in ("reg_read", "reg_write"):
        return None
    owner = socket.sim.vsoc.memory_map.aperture_owner(req.addr)
    if owner is None or owner[0] != socket.pos:
        return None
    body = {"kind": req.kind, "offset": owner[1], "tag": req.tag}
    if req.kind == "reg_write":
        body["value"] = req.data[0]
    socket.shortcuts += 1
    return socket.register_access(body, socket.pos)


def coh_packet(msg: CohMsg) -> Packet:
    payload = list(msg.data) if msg.data is not None else []
    return Packet(msg.src, msg.dst, msg.msg_class, payload, msg)


def split_by_partition(vsoc: ValidatedSoC, addr: int, words: int):
    """Yield (memory tile, addr, words, word offset) pieces of a burst."""
    mmap = vsoc.memory_map
    done = 0
    while done < words:
        a = addr + done * WORD_BYTES
        part = mmap.partition_for(a)
        if part is None:
            raise UnmappedAddress(f"{a:#x}")
        n = min(words - done, (part.end - a) // WORD_BYTES)
        yield part.tile, a, n, done
        done += n


# ---------------------------------------------------------------------------
# sockets


class Socket:
    kind = TileKind.EMPTY

    def __init__(self, sim, pos: Position, name: str):
        self.sim = sim
        self.pos = pos
        self.name = name
        self.local: Deque[Packet] = deque()
        self.shortcuts = 0

    # -- plumbing -----------------------------------------------------------
    def send(self, pkt: Packet) -> None:
        pkt.src = self.pos
        if pkt.dst == self.pos:
            # same-tile master and slave: no router traversal
            self.shortcuts += 1
            self.local.append(pkt)
            return
        self.sim.noc.inject_packet(self.pos, pkt)

    def event(self, event: str, detail: Any = "") -> None:
        self.sim.timeline_event(self.name, event, detail)

    def fault(self, code: str, detail: str) -> None:
        self.sim.fault(self.name, code, detail)

    def register_access(self, body: dict, src: Position) -> dict:
        return {"kind": "reg_ack", "tag": body.get("tag"), "value": 0,
                "error": "BadRegisterOffset"}

    def _serve_register(self, pkt: Packet) -> None:
        ack = self.register_access(pkt.body, pkt.src)
        if ack is not None:
            self.send(Packet(self.pos, pkt.src, MessageClass.IO_IRQ, [], ack))

    # -- hooks --------------------------------------------------------------
    def deliver(self, pkt: Packet) -> bool:
        if pkt.body.get("kind") in ("reg_read", "reg_write"):
            self._serve_register(pkt)
            return True
        self.fault("UnexpectedPacket", str(pkt.body.get("kind")))
        return True

    def drain_local(self) -> None:
        pending, self.local = self.local, deque()
        for pkt in pending:
            if not self.deliver(pkt):
                self.local.append(pkt)

    def proxy_step(self, now: int) -> None:
        pass

    def cache_step(self, now: int) -> None:
        pass

    def accel_step(self, now: int) -> None:
        pass

    def dram_step(self, now: int) -> None:
        pass

    def busy(self) -> bool:
        return bool(self.local)

    def describe(self) -> dict:
        return {"name": self.name, "kind": self.kind.value, "busy": self.busy()}


class EmptySocket(Socket):
    pass


# -- L2 helper shared by processor and fully-coherent accelerator sockets ----


class _L2Port:
    def __init__(self, socket: Socket, cache: L2Cache):
        self.socket = socket
        self.cache = cache
        self.done: Dict[Any, Any] = {}

    def flush_out(self) -> None:
        c = self.cache
        for msg in c.outbox:
            self.socket.send(coh_packet(msg))
        c.outbox.clear()
        for token, data in c.completions:
            self.done[token] = data
        c.completions.clear()


def _home(vsoc: ValidatedSoC):
    mmap, ls = vsoc.memory_map, vsoc.config.cache.line_size_bytes

    def home(line: int):
        tile = mmap.memory_tile_for(line * ls)
        if tile is None:
            raise UnmappedAddress(f"{line * ls:#x}")
        return tile
    return home


# -- memory tile --------------------------------------------------------------


@dataclass
class _DmaService:
    pkt: Packet
    remaining: int
    data: List[int]


class MemorySocket(Socket):
    kind = TileKind.MEMORY

    def __init__(self, sim, pos, name):
        super().__init__(sim, pos, name)
        cfg = sim.vsoc.config
        self.llc = LlcDirectory(pos, cfg.cache)
        self.llc.trace = sim.coherence_trace
        self.dram = DramChannel(cfg.dram.latency, cfg.dram.bandwidth_words, sim.memory)
        self.ls = cfg.cache.line_size_bytes
        self.wpl = cfg.cache.words_per_line
        self.latency = cfg.cache.llc_latency
        self.delayed: Deque[Tuple[int, Packet]] = deque()
        self.services: Dict[int, _DmaService] = {}
        self.next_service = 0
        self.regs = {MEM_REG_BASE: 0, MEM_REG_LEN: 0}
        self.flush_waits: Dict[int, Tuple[Packet, int]] = {}
        self.dma_words: Dict[Tuple[Position, str], int] = {}

    def _later(self, pkt: Packet) -> None:
        self.delayed.append((self.sim.now + self.latency, pkt))

    def register_access(self, body: dict, src: Position) -> Optional[dict]:
        off = body["offset"]
        ack = {"kind": "reg_ack", "tag": body.get("tag"), "value": 0, "error": None}
        if off not in (MEM_REG_BASE, MEM_REG_LEN, MEM_REG_TRIGGER):
            ack["error"] = "BadRegisterOffset"
            return ack
        if body["kind"] == "reg_read":
            ack["value"] = self.regs.get(off, 0)
            return ack
        if off != MEM_REG_TRIGGER:
            self.regs[off] = body["value"]
            return ack
        return None  # handled by the caller: the trigger acks after the flush

    def _serve_register(self, pkt: Packet) -> None:
        ack = self.register_access(pkt.body, pkt.src)
        if ack is not None:
            self.send(Packet(self.pos, pkt.src, MessageClass.IO_IRQ, [], ack))
            return
        base, length = self.regs[MEM_REG_BASE], self.regs[MEM_REG_LEN]
        first, last = base // self.ls, (base + max(length, 1) - 1) // self.ls
        sid = self.next_service
        self.next_service += 1
        lines = [ln for ln in range(first, last + 1)
                 if self.sim.vsoc.memory_map.memory_tile_for(ln * self.ls) == self.pos]
        if not lines:
            self.send(Packet(self.pos, pkt.src, MessageClass.IO_IRQ, [],
                             {"kind": "reg_ack", "tag": pkt.body.get("tag"), "value": 0,
                              "error": None}))
            return
        self.flush_waits[sid] = (pkt, len(lines))
        for ln in lines:
            self.llc.flush_line(("flush", sid), ln)

    def deliver(self, pkt: Packet) -> bool:
        body = pkt.body
        if isinstance(body, CohMsg):
            return self.llc.handle(body)
        kind = body.get("kind")
        if kind == "dma_req":
            self._dma(pkt)
            return True
        return super().deliver(pkt)

    def _dma(self, pkt: Packet) -> None:
        b = pkt.body
        rw, addr, n = b["rw"], b["addr"], b["words"]
        key = (pkt.src, rw)
        self.dma_words[key] = self.dma_words.get(key, 0) + n
        sid = self.next_service
        self.next_service += 1
        mode = b["mode"]
        if mode == CoherenceMode.NON_COHERENT_DMA:
            self.services[sid] = _DmaService(pkt, 1, [])
            self.dram.submit(self.sim.now, rw, addr, n,
                             pkt.payload_words if rw == WRITE else None, ("dma", sid))
            return
        # served by the LLC one line at a time
        pieces = []
        done = 0
        while done < n:
            a = addr + done * WORD_BYTES
            line, off = a // self.ls, (a % self.ls) // WORD_BYTES
            cnt = min(n - done, self.wpl - off)
            pieces.append((line, off, cnt, done))
            done += cnt
        self.services[sid] = _DmaService(pkt, len(pieces), [0] * n if rw == READ else [])
        for i, (line, off, cnt, at) in enumerate(pieces):
            words = tuple(pkt.payload_words[at:at + cnt]) if rw == WRITE else None
            self.llc.dma_line(("llc_dma", sid, at), rw, mode, line, off, cnt, words)

    def _respond(self, sid: int, delayed: bool) -> None:
        svc = self.services.pop(sid)
        b = svc.pkt.body
        payload = svc.data if b["rw"] == READ else []
        rsp = Packet(self.pos, svc.pkt.src, MessageClass.DMA_RSP, payload,
                     {"kind": "dma_rsp", "tag": b["tag"]})
        if delayed:
            self._later(rsp)
        else:
            self.send(rsp)

    def cache_step(self, now: int) -> None:
        llc = self.llc
        for msg in llc.outbox:
            self._later(coh_packet(msg))
        llc.outbox.clear()
        for req in llc.dram_out:
            self.dram.submit(now, req.op, req.line * self.ls, self.wpl, req.data,
                             ("llc", req.token) if req.op == READ else None)
        llc.dram_out.clear()
        llc.applied.clear()
        for token, result in llc.completions:
            if token[0] == "llc_dma":
                _, sid, at = token
                svc = self.services[sid]
                if result is not None:
                    svc.data[at:at + len(result)] = list(result)
                svc.remaining -= 1
                if svc.remaining == 0:
                    self._respond(sid, delayed=True)
            elif token[0] == "flush":
                sid = token[1]
                pkt, left = self.flush_waits[sid]
                if left == 1:
                    del self.flush_waits[sid]
                    self._later(Packet(self.pos, pkt.src, MessageClass.IO_IRQ, [],
                                       {"kind": "reg_ack", "tag": pkt.body.get("tag"),
                                        "value": 0, "error": None}))
                else:
                    self.flush_waits[sid] = (pkt, left - 1)
        llc.completions.clear()
        while self.delayed and self.delayed[0][0] <= now:
            self.send(self.delayed.popleft()[1])

    def dram_step(self, now: int) -> None:
        for token, data in self.dram.cycle(now):
            if token is None:
                continue
            if token[0] == "llc":
                self.llc.dram_done(token[1], data)
            else:
                svc = self.services[token[1]]
                if data is not None:
                    svc.data = data
                self._respond(token[1], delayed=False)

    def busy(self) -> bool:
        return bool(self.local or self.llc.busy() or not self.dram.idle or self.delayed
                    or self.services or self.flush_waits)

    def describe(self) -> dict:
        d = super().describe()
        d.update(locked_lines=sorted(hex(l) for l in self.llc.locks),
                 dram_queue=len(self.dram.queue), services=len(self.services))
        return d


# -- auxiliary tile -------------------------------------------------------------


class AuxSocket(Socket):
    """IRQ dispatch: acc_done packets are forwarded to the invoking processor."""
    kind = TileKind.AUXILIARY

    def __init__(self, sim, pos, name):
        super().__init__(sim, pos, name)
        self.pending: List[Tuple[Position, dict]] = []
        self.forwarded = 0

    def deliver(self, pkt: Packet) -> bool:
        if pkt.body.get("kind") == "acc_done":
            self.pending.append((pkt.src, pkt.body))
            return True
        return super().deliver(pkt)

    def proxy_step(self, now: int) -> None:
        if not self.pending:
            return
        for src, body in sorted(self.pending, key=lambda x: x[0]):
            target = body.get("invoker")
            if target is None:
                self.sim.warn(self.name, "SpuriousIrq", f"no owner for {src}")
                continue
            self.forwarded += 1
            self.send(Packet(self.pos, target, MessageClass.IO_IRQ, [],
                             {"kind": "irq", "acc": src, "raised": body.get("raised")}))
        self.pending.clear()

    def busy(self) -> bool:
        return bool(self.local or self.pending)


# -- accelerator tile -------------------------------------------------------------


@dataclass
class _Transfer:
    kind: str            # load or store
    half: int
    words: int
    remaining: int
    data: List[int]
    lines: Optional[Deque[Tuple[int, int, int, int]]] = None   # fully coherent path
    packets: Tuple[Packet, ...] = ()
    released: bool = False     # store data has left the PLM half


class AcceleratorSocket(Socket):
    kind = TileKind.ACCELERATOR

    def __init__(self, sim, pos, name, spec):
        super().__init__(sim, pos, name)
        cfg = sim.vsoc.config
        self.acc = Accelerator(name, pos, spec.accel_params, spec.coherence_mode,
                               timeline=sim.accel_event,
                               peer_params=sim.accel_params_at,
                               tile_of_index=sim.position_of_index)
        self.l2 = _L2Port(self, L2Cache(pos, cfg.cache, _home(sim.vsoc)))
        self.l2.cache.trace = sim.coherence_trace
        self.ls = cfg.cache.line_size_bytes
        self.transfers: Dict[int, _Transfer] = {}
        self.next_tag = 0
        self.p2p_waiting: Dict[int, int] = {}     # consumer side: request seq -> half
        self._fc_addr: Dict[int, int] = {}
        self.write_queue: Deque[Packet] = deque()

    def _tag(self) -> int:
        t = self.next_tag
        self.next_tag += 1
        return t

    def register_access(self, body: dict, src: Position) -> dict:
        ack = {"kind": "reg_ack", "tag": body.get("tag"), "value": 0, "error": None}
        try:
            if body["kind"] == "reg_read":
                ack["value"] = self.acc.read_reg(body["offset"])
            else:
                self.acc.write_reg(body["offset"], body["value"], src, self.sim.now)
        except AcceleratorError as exc:
            ack["error"] = exc.code
            self.fault(exc.code, str(exc))
        return ack

    def deliver(self, pkt: Packet) -> bool:
        body = pkt.body
        if isinstance(body, CohMsg):
            self.l2.cache.handle(body)
            return True
        kind = body.get("kind")
        now = self.sim.now
        if kind == "dma_rsp":
            tag, off = body["tag"]
            tr = self.transfers[tag]
            if tr.kind == "load":
                tr.data[off:off + len(pkt.payload_words)] = pkt.payload_words
            tr.remaining -= 1
            if tr.remaining == 0:
                self._finish(tag, now)
            return True
        if kind == "p2p_req":
            self.acc.p2p_credit()
            return True
        if kind == "p2p_data":
            half = self.p2p_waiting.pop(min(self.p2p_waiting))
            self.acc.load_done(half, pkt.payload_words, now)
            return True
        return super().deliver(pkt)

    def _finish(self, tag: int, now: int) -> None:
        tr = self.transfers.pop(tag)
        if tr.kind == "load":
            self.acc.load_done(tr.half, tr.data, now)
        elif tr.packets:
            # posted DMA store: the half was released earlier, this is the ack
            if not tr.released:
                self.acc.store_done(tr.half, now)
            self.acc.outstanding_writes -= 1
        else:
            self.acc.store_done(tr.half, now)

    def _release_stores(self, now: int) -> None:
        for tr in self.transfers.values():
            if tr.packets and not tr.released and all(p.departed_cycle >= 0 for p in tr.packets):
                tr.released = True
                self.acc.store_done(tr.half, now)

    def cache_step(self, now: int) -> None:
        port = self.l2
        # fully-coherent transfers walk the accelerator's own L2 line by line
        for tag, tr in list(self.transfers.items()):
            if tr.lines is None:
                continue
            while tr.lines:
                line, off, cnt, at = tr.lines[0]
                token = ("fc", tag, at)
                words = None
                if tr.kind == "store":
                    words = {off + i: tr.data[at + i] for i in range(cnt)}
                try:
                    status, data = port.cache.access(READ if tr.kind == "load" else WRITE,
                                                     line, words, token)
                except MshrFull:
                    break
                if status == "stall":
                    break
                tr.lines.popleft()
                if status == "hit":
                    port.done[token] = data
        port.flush_out()
        for token in sorted((t for t in port.done if t[0] == "fc"), key=lambda t: t[1:]):
            _, tag, at = token
            data = port.done.pop(token)
            tr = self.transfers[tag]
            if tr.kind == "load":
                line_words = self.ls // WORD_BYTES
                off = (self._fc_addr[tag] + at * WORD_BYTES) % self.ls // WORD_BYTES
                cnt = min(tr.words - at, line_words - off)
                tr.data[at:at + cnt] = list(data[off:off + cnt])
            tr.remaining -= 1
            if tr.remaining == 0:
                self._fc_addr.pop(tag)
                self._finish(tag, now)

    def _lines(self, addr: int, words: int):
        out = deque()
        done = 0
        wpl = self.ls // WORD_BYTES
        while done < words:
            a = addr + done * WORD_BYTES
            line, off = a // self.ls, (a % self.ls) // WORD_BYTES
            cnt = min(words - done, wpl - off)
            out.append((line, off, cnt, done))
            done += cnt
        return out

    def accel_step(self, now: int) -> None:
        acc = self.acc
        self._release_stores(now)
        for act in acc.cycle(now):
            if act.kind == "irq":
                self.send(Packet(self.pos, self.sim.aux_position, MessageClass.IO_IRQ, [],
                                 {"kind": "acc_done", "invoker": acc.invoker, "raised": now}))
            elif act.kind == "p2p_load":
                seq = self._tag()
                self.p2p_waiting[seq] = act.half
                self.send(Packet(self.pos, act.peer, MessageClass.DMA_REQ, [],
                                 {"kind": "p2p_req", "burst": act.burst}))
            elif act.kind == "p2p_store":
                self.send(Packet(self.pos, act.peer, MessageClass.DMA_REQ, list(act.data),
                                 {"kind": "p2p_data", "burst": act.burst}))
                acc.store_done(act.half, now)
            else:
                self._dma(act, now)
        self._pump_writes()

    def _dma(self, act, now: int) -> None:
        tag = self._tag()
        kind = "load" if act.kind == "load" else "store"
        data = [0] * act.words if kind == "load" else list(act.data)
        if self.acc.mode == CoherenceMode.FULLY_COHERENT:
            lines = self._lines(act.addr, act.words)
            self.transfers[tag] = _Transfer(kind, act.half, act.words, len(lines), data, lines)
            self._fc_addr[tag] = act.addr
            return
        rw = READ if kind == "load" else WRITE
        pieces = list(split_by_partition(self.sim.vsoc, act.addr, act.words))
        if rw == WRITE:
            # store data travels in line-sized packets so that read requests
            # never queue behind a whole burst at the injection port
            wpl = self.ls // WORD_BYTES
            chunks = []
            for tile, addr, n, at in pieces:
                done = 0
                while done < n:
                    a = addr + done * WORD_BYTES
                    cnt = min(n - done, wpl - (a % self.ls) // WORD_BYTES)
                    chunks.append((tile, a, cnt, at + done))
                    done += cnt
            pieces = chunks
        tr = _Transfer(kind, act.half, act.words, len(pieces), data)
        self.transfers[tag] = tr
        sent = []
        for tile, addr, n, at in pieces:
            body = {"kind": "dma_req", "rw": rw, "addr": addr, "words": n,
                    "mode": self.acc.mode, "tag": (tag, at)}
            payload = data[at:at + n] if rw == WRITE else []
            pkt = Packet(self.pos, tile, MessageClass.DMA_REQ, payload, body)
            sent.append(pkt)
            if rw == WRITE:
                self.write_queue.append(pkt)
            else:
                self.send(pkt)
        if rw == WRITE:
            tr.packets = tuple(sent)
            self.acc.outstanding_writes += 1

    def _pump_writes(self) -> None:
        noc = self.sim.noc
        plane = noc.plane_for(MessageClass.DMA_REQ)
        while self.write_queue and noc.can_accept(self.pos, plane):
            self.send(self.write_queue.popleft())

    def busy(self) -> bool:
        return bool(self.local or self.acc.busy or self.transfers or self.write_queue or self.l2.cache.busy()
                    or self.p2p_waiting)

    def describe(self) -> dict:
        d = super().describe()
        p = self.acc.prog
        d.update(phase=self.acc.phase.value, loads_done=p.loads_done, computed=p.computed,
                 stores_done=p.stores_done, credits=self.acc.p2p_credits,
                 transfers=len(self.transfers))
        return d


# -- processor tile ---------------------------------------------------------------


class BumpAllocator:
    """Per-partition bump allocator shared by all processors (no reuse)."""

    def __init__(self, vsoc: ValidatedSoC):
        self.parts = vsoc.memory_map.partitions
        self.align = vsoc.config.cache.line_size_bytes
        self.next = [p.base for p in self.parts]

    def alloc(self, nbytes: int, hint: Optional[int] = None) -> int:
        size = -(-max(nbytes, 1) // self.align) * self.align
        order = list(range(len(self.parts)))
        if hint is not None:
            start = hint % len(self.parts)
            order = order[start:] + order[:start]
        for i in order:
            if self.next[i] + size <= self.parts[i].end:
                base = self.next[i]
                self.next[i] += size
                return base
        raise AllocExhausted(f"no partition has {size} free bytes")


@dataclass
class Buffer:
    name: str
    base: int
    nbytes: int
    freed: bool = False

    @property
    def words(self) -> int:
        return self.nbytes // WORD_BYTES


class ProcessorSocket(Socket):
    """Scripted processor: runs one driver op at a time through its private L2."""
    kind = TileKind.PROCESSOR

    def __init__(self, sim, pos, name, script=()):
        super().__init__(sim, pos, name)
        cfg = sim.vsoc.config
        self.l2 = _L2Port(self, L2Cache(pos, cfg.cache, _home(sim.vsoc)))
        self.l2.cache.trace = sim.coherence_trace
        self.ls = cfg.cache.line_size_bytes
        self.script = tuple(script)
        self.buffers: Dict[str, Buffer] = {}
        self.regs: Dict[int, int] = {}
        self.acks: Dict[int, dict] = {}
        self.next_tag = 0
        self.irq_expected: Dict[Position, int] = {}
        self.irq_pending: Dict[Position, int] = {}
        self.loads: List[Tuple[int, int]] = []
        self.ops_done = 0
        self.barriers = 0
        self.finished = not self.script
        self.waiting_barrier = False
        self.run_log: List[dict] = []
        self._prog = self._program()

    # -- network side -------------------------------------------------------
    def register_access(self, body: dict, src: Position) -> dict:
        ack = {"kind": "reg_ack", "tag": body.get("tag"), "value": 0, "error": None}
        off = body["offset"]
        if off % WORD_BYTES:
            ack["error"] = "BadRegisterOffset"
        elif body["kind"] == "reg_read":
            ack["value"] = self.regs.get(off, 0)
        else:
            self.regs[off] = body["value"]
        return ack

    def deliver(self, pkt: Packet) -> bool:
        body = pkt.body
        if isinstance(body, CohMsg):
            self.l2.cache.handle(body)
            return True
        kind = body.get("kind")
        if kind == "reg_ack":
            self.acks[body["tag"]] = body
            return True
        if kind == "irq":
            acc = body["acc"]
            if self.irq_expected.get(acc, 0) <= 0:
                self.sim.warn(self.name, "SpuriousIrq", f"unexpected IRQ from {acc}")
                return True
            self.irq_expected[acc] -= 1
            self.irq_pending[acc] = self.irq_pending.get(acc, 0) + 1
            self.sim.irq_received(self, acc, body.get("raised"))
            return True
        return super().deliver(pkt)

    def proxy_step(self, now: int) -> None:
        if not self.finished:
            next(self._prog, None)

    def cache_step(self, now: int) -> None:
        self.l2.flush_out()

    def busy(self) -> bool:
        return bool(self.local or self.l2.cache.busy() or not self.finished)

    def describe(self) -> dict:
        d = super().describe()
        d.update(ops_done=self.ops_done, ops_total=len(self.script),
                 mshrs=sorted(hex(l) for l in self.l2.cache.mshr))
        return d

    # -- sequencer ----------------------------------------------------------
    def _program(self):
        for op in self.script:
            try:
                yield from getattr(self, "_op_" + op.kind)(op)
            except AllocExhausted as exc:
                # later ops depend on the buffer, so the script stops here
                self.fault(exc.code, str(exc))
                break
            self.ops_done += 1
            yield
        self.finished = True

    def _tag(self) -> int:
        t = self.next_tag
        self.next_tag += 1
        return t

    def _addr(self, op: Op) -> int:
        if "buffer" in op.args:
            return self.buffers[op["buffer"]].base + op["offset"]
        return op["addr"]

    def _mem_access(self, kind: str, addr: int, value: Optional[int] = None):
        """Generator: one cached access; the loaded (or stored) line is returned."""
        line, off = addr // self.ls, (addr % self.ls) // WORD_BYTES
        token = ("seq", self._tag())
        words = None if value is None else {off: value}
        while True:
            try:
                status, data = self.l2.cache.access(kind, line, words, token)
            except MshrFull:
                status = "stall"
            if status != "stall":
                break
            yield
        if status == "miss":
            while token not in self.l2.done:
                yield
            data = self.l2.done.pop(token)
        return data[off]

    def _register(self, kind: str, tile: Position, offset: int, value: int = 0):
        """Generator: non-posted register access; returns the ack body."""
        base, _ = self.sim.vsoc.memory_map.aperture(tile)
        tag = self._tag()
        req = LocalRequest(kind, base + offset, data=(value,), tag=tag)
        local = local_shortcut(self, req)
        if local is not None:
            return local
        if kind == "reg_write" and offset == accmod.REG_CMD and value == accmod.CMD_START \
                and self.sim.vsoc.config.tile_at(tile).kind == TileKind.ACCELERATOR:
            self.irq_expected[tile] = self.irq_expected.get(tile, 0) + 1
        self.send(master_proxy_translate(self.sim.vsoc, self.pos, req))
        while tag not in self.acks:
            yield
        ack = self.acks.pop(tag)
        if ack.get("error"):
            if kind == "reg_write" and offset == accmod.REG_CMD and tile in self.irq_expected:
                self.irq_expected[tile] -= 1
            self.fault(ack["error"], f"register {offset:#x} at {tile}")
        return ack

    def _op_load(self, op: Op):
        addr = self._addr(op)
        mmap = self.sim.vsoc.memory_map
        if mmap.in_dram(addr):
            value = yield from self._mem_access(READ, addr)
        elif mmap.aperture_owner(addr) is not None:
            tile, off = mmap.aperture_owner(addr)
            ack = yield from self._register("reg_read", tile, off)
            value = ack["value"]
        else:
            self.fault("UnmappedAddress", f"load {addr:#x}")
            return
        self.loads.append((addr, value))

    def _op_store(self, op: Op):
        addr = self._addr(op)
        mmap = self.sim.vsoc.memory_map
        if mmap.in_dram(addr):
            yield from self._mem_access(WRITE, addr, op["value"])
        elif mmap.aperture_owner(addr) is not None:
            tile, off = mmap.aperture_owner(addr)
            yield from self._register("reg_write", tile, off, op["value"])
        else:
            self.fault("UnmappedAddress", f"store {addr:#x}")

    def _flush_l2(self):
        token = ("flush", self._tag())
        status, _ = self.l2.cache.flush_all(token)
        if status == "miss":
            while token not in self.l2.done:
                yield
            self.l2.done.pop(token)

    def _op_flush_l2(self, op: Op):
        yield from self._flush_l2()

    def _op_write_reg(self, op: Op):
        yield from self._register("reg_write", op["tile"], op["offset"], op["value"])

    def _op_read_reg(self, op: Op):
        ack = yield from self._register("reg_read", op["tile"], op["offset"])
        self.loads.append((op["offset"], ack["value"]))

    def _op_esp_alloc(self, op: Op):
        nbytes = op["bytes"]
        base = self.sim.allocator.alloc(nbytes, op.get("memory_tile"))
        buf = Buffer(op["name"], base, nbytes)
        self.buffers[buf.name] = buf
        init = op.get("init", "zero")
        if init == "ramp":
            self.sim.memory.write(base, range(1, buf.words + 1))
        elif init == "random":
            rng = random.Random(f"{self.sim.seed}:{buf.name}")
            self.sim.memory.write(base, [rng.getrandbits(32) for _ in range(buf.words)])
        elif isinstance(init, list):
            self.sim.memory.write(base, init[:buf.words])
        self.event("ESP_ALLOC", f"{buf.name}@{base:#x}+{nbytes}")
        return
        yield

    def _op_esp_free(self, op: Op):
        self.buffers[op["name"]].freed = True
        return
        yield

    def _op_barrier(self, op: Op):
        self.barriers += 1
        while not self.sim.barrier_open(self.barriers):
            self.waiting_barrier = True
            yield
        self.waiting_barrier = False

    def _op_wait_irq(self, op: Op):
        tile = op["tile"]
        while not self.irq_pending.get(tile):
            yield
        self.irq_pending[tile] -= 1

    # -- esp_run --------------------------------------------------------------
    def _mode(self, inv: Invocation) -> CoherenceMode:
        return inv.mode or self.sim.vsoc.config.tile_at(inv.accel).coherence_mode

    def _flush_ranges(self, names):
        """Write back and invalidate every LLC line of the named buffers."""
        for name in sorted(names):
            buf = self.buffers[name]
            for tile, addr, n, _ in split_by_partition(self.sim.vsoc, buf.base, buf.words):
                yield from self._register("reg_write", tile, MEM_REG_BASE, addr)
                yield from self._register("reg_write", tile, MEM_REG_LEN, n * WORD_BYTES)
                yield from self._register("reg_write", tile, MEM_REG_TRIGGER, 1)

    def _configure(self, inv: Invocation, by_name: Dict[str, Invocation]):
        a = accmod
        index = self.sim.index_of_position
        regs = [(a.REG_MODE, self._mode(inv).code),
                (a.REG_SRC, self.buffers[inv.src].base if inv.src else 0),
                (a.REG_DST, self.buffers[inv.dst].base if inv.dst else 0),
                (a.REG_P2P_SRC, index(by_name[inv.p2p_src].accel) + 1 if inv.p2p_src else 0),
                (a.REG_P2P_DST, index(by_name[inv.p2p_dst].accel) + 1 if inv.p2p_dst else 0)]
        for off, val in regs:
            yield from self._register("reg_write", inv.accel, off, val)

    def _start(self, inv: Invocation, by_name):
        yield from self._configure(inv, by_name)
        self.event("START", inv.name)
        ack = yield from self._register("reg_write", inv.accel, accmod.REG_CMD, accmod.CMD_START)
        return not ack.get("error")

    def _op_esp_run(self, op: Op):
        now = self.sim.now
        invs = op.invocations
        by_name = {i.name: i for i in invs}
        self.event("ESP_RUN_START", ",".join(i.name for i in invs))
        record = {"start": now, "invocations": {}}
        flush = op.get("flush", True)
        # outputs that may be cached; non-coherent producers write DRAM directly
        produced = {i.dst for i in invs
                    if i.dst and self._mode(i) != CoherenceMode.NON_COHERENT_DMA}
        if flush:
            modes = {self._mode(i) for i in invs}
            if CoherenceMode.NON_COHERENT_DMA in modes:
                yield from self._flush_l2()
                names = set()
                for i in invs:
                    if self._mode(i) == CoherenceMode.NON_COHERENT_DMA:
                        names.update(b for b in (i.src, i.dst) if b)
                yield from self._flush_ranges(names)
            elif CoherenceMode.LLC_COHERENT_DMA in modes:
                yield from self._flush_l2()
        started: Dict[str, int] = {}
        done: set = set()
        failed: set = set()
        busy: Dict[Position, str] = {}
        while len(done) + len(failed) < len(invs):
            progressed = False
            for inv in invs:
                if inv.name in started or inv.name in failed:
                    continue
                if inv.p2p_src:       # started together with its producer
                    continue
                group = [inv]
                if inv.p2p_dst:
                    group.insert(0, by_name[inv.p2p_dst])
                deps = set()
                for g in group:
                    deps.update(g.after)
                deps -= {g.name for g in group}
                if deps & failed:
                    failed.update(g.name for g in group)
                    continue
                if not deps <= done or any(g.accel in busy for g in group):
                    continue
                for g in group:
                    if flush and g.src in produced and not self._mode(g).hardware_coherent:
                        # the producer's data may still sit in the LLC or a private cache
                        yield from self._flush_ranges({g.src})
                    ok = yield from self._start(g, by_name)
                    if ok:
                        started[g.name] = self.sim.now
                        busy[g.accel] = g.name
                    else:
                        failed.add(g.name)
                progressed = True
            for acc, name in sorted(busy.items()):
                if self.irq_pending.get(acc):
                    self.irq_pending[acc] -= 1
                    del busy[acc]
                    done.add(name)
                    self.event("IRQ_RECV", name)
                    record["invocations"][name] = {"start": started[name],
                                                   "done": self.sim.now}
                    progressed = True
            if not progressed:
                yield
        record["done"] = self.sim.now
        self.run_log.append(record)
        self.event("ESP_RUN_DONE", ",".join(i.name for i in invs))
