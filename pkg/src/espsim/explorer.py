"""Exhaustive interleaving explorer for the coherence controllers.

Two private L2 caches and one accelerator share a single line.  The
accelerator is either a third L2 (fully-coherent) or a DMA agent in one of
the three DMA modes.  Every event order is explored: an idle agent may start
any operation while the operation budget lasts, and the head message of any
(source, destination, plane) channel may be delivered.  Channels are FIFO,
matching the per-plane ordering of the mesh, but different channels race
freely.

Checked in every reached state: single-writer/multiple-reader and directory
accuracy.  Checked at every read completion in hardware-coherent modes: the
value was held by an atomic register at some point during the read.
Checked in every terminal state: the system is quiescent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .coherence import (READ, WRITE, CohMsg, L2Cache, LlcDirectory, _msg_key,
                        directory_violation, swmr_violation)
from .config import CacheParams, CoherenceMode, MessageClass, plane_for_message

LINE = 0
HOME = "llc"
DRAM = "dram"
FLUSH = "flush"
PARAMS = CacheParams(line_size_bytes=16, l2_mshrs=2)


@dataclass(frozen=True)
class DmaMsg:
    kind: str                 # DmaRead, DmaWrite, DmaRsp
    src: str
    dst: str
    value: Optional[int] = None

    @property
    def msg_class(self) -> MessageClass:
        return MessageClass.DMA_RSP if self.kind == "DmaRsp" else MessageClass.DMA_REQ


@dataclass
class _Agent:
    name: str
    op: Optional[str] = None
    value: Optional[int] = None
    seen: Tuple[int, ...] = ()


@dataclass
class World:
    l2s: List[L2Cache]
    llc: LlcDirectory
    dma_agent: Optional[str]
    mode: CoherenceMode
    agents: Dict[str, _Agent]
    channels: Dict[Tuple[str, str, int], Tuple] = field(default_factory=dict)
    dram: Tuple[int, ...] = (0, 0)
    ops_left: int = 0
    writes: int = 0
    register: int = 0
    track_values: bool = True

    def key(self):
        """State key with data values renamed in order of first appearance.

        The controllers never branch on data, so states that differ only by
        a consistent renaming of written values behave identically.
        """
        names = {0: 0}

        def v(x):
            if x is None:
                return None
            if x not in names:
                names[x] = len(names)
            return names[x]

        if self.track_values:
            reg = v(self.register)
            agents = tuple((a.name, a.op, v(a.value), tuple(sorted(v(x) for x in a.seen)))
                           for a in self.agents.values())
        else:
            reg = None
            agents = tuple((a.name, a.op, v(a.value)) for a in self.agents.values())
        chans = tuple((k, tuple(_chan_key(m, v) for m in q))
                      for k, q in sorted(self.channels.items()) if q)
        return (reg, agents, tuple(v(x) for x in self.dram),
                tuple(c.key(v) for c in self.l2s), self.llc.key(v), chans, self.ops_left)

    def clone(self) -> "World":
        return World([c.clone() for c in self.l2s], self.llc.clone(), self.dma_agent, self.mode,
                     {n: _Agent(a.name, a.op, a.value, a.seen) for n, a in self.agents.items()},
                     dict(self.channels), self.dram, self.ops_left, self.writes, self.register,
                     self.track_values)


def _chan_key(msg, v):
    if isinstance(msg, DmaMsg):
        return (msg.kind, msg.src, msg.dst, v(msg.value))
    return _msg_key(msg, v)


@dataclass
class ExploreResult:
    mode: CoherenceMode
    max_ops: int
    states: int = 0
    transitions: int = 0
    terminals: int = 0
    completed_ops: int = 0
    swmr_violations: List[str] = field(default_factory=list)
    directory_violations: List[str] = field(default_factory=list)
    value_violations: List[str] = field(default_factory=list)
    deadlocks: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.swmr_violations or self.directory_violations or
                    self.value_violations or self.deadlocks)


class Explorer:
    def __init__(self, mode: CoherenceMode, max_ops: int = 6, exclusive: bool = False,
                 params: CacheParams = PARAMS):
        self.mode = CoherenceMode(mode)
        self.max_ops = max_ops
        self.params = CacheParams(**{**params.__dict__, "exclusive_on_clean_gets": exclusive})
        self.check_values = self.mode.hardware_coherent
        self.wpl = self.params.words_per_line

    # -- construction -------------------------------------------------------
    def initial(self) -> World:
        names = ["cpu0", "cpu1"]
        dma_agent = None
        if self.mode == CoherenceMode.FULLY_COHERENT:
            names.append("acc")
        else:
            dma_agent = "acc"
        l2s = [L2Cache(n, self.params, lambda line: HOME, sets=1, ways=1) for n in names]
        llc = LlcDirectory(HOME, self.params, sets=1, ways=1)
        agents = {n: _Agent(n) for n in names + ([dma_agent] if dma_agent else [])}
        return World(l2s, llc, dma_agent, self.mode, agents, dram=(0,) * self.wpl,
                     ops_left=self.max_ops, track_values=self.check_values)

    # -- event generation ---------------------------------------------------
    def events(self, w: World):
        evs = []
        if w.ops_left > 0:
            for name, agent in w.agents.items():
                if agent.op is not None:
                    continue
                kinds = (READ, WRITE) if name == w.dma_agent else (READ, WRITE, FLUSH)
                evs.extend(("issue", name, k) for k in kinds)
        for key in sorted(w.channels):
            if w.channels[key]:
                evs.append(("deliver", key))
        return evs

    def _l2(self, w: World, name: str) -> Optional[L2Cache]:
        for c in w.l2s:
            if c.owner == name:
                return c
        return None

    def _set_register(self, w: World, value: int) -> None:
        w.register = value
        for a in w.agents.values():
            if a.op == READ:
                a.seen = tuple(sorted(set(a.seen) | {value}))

    def _complete_read(self, w: World, agent: _Agent, value: int, res: ExploreResult) -> None:
        if self.check_values and value not in agent.seen:
            res.value_violations.append(
                f"{agent.name} read {value}, register held {list(agent.seen)} meanwhile")
        agent.op, agent.seen = None, ()
        res.completed_ops += 1

    def _complete(self, w: World, name: str, data, res: ExploreResult) -> None:
        agent = w.agents[name]
        if agent.op == READ:
            self._complete_read(w, agent, data[0], res)
            return
        if agent.op == WRITE and name != w.dma_agent:
            self._set_register(w, agent.value)
        agent.op, agent.value = None, None
        res.completed_ops += 1

    def apply(self, w: World, ev, res: ExploreResult) -> None:
        if ev[0] == "issue":
            _, name, kind = ev
            agent = w.agents[name]
            w.ops_left -= 1
            agent.op = kind
            if kind == READ:
                agent.seen = (w.register,)
            if kind == WRITE:
                w.writes += 1
                agent.value = w.writes
            if name == w.dma_agent:
                dst = DRAM if self.mode == CoherenceMode.NON_COHERENT_DMA else HOME
                self._send(w, DmaMsg("DmaRead" if kind == READ else "DmaWrite", name, dst,
                                     agent.value))
            else:
                cache = self._l2(w, name)
                if kind == FLUSH:
                    status, _ = cache.flush_all(token=name)
                else:
                    words = {0: agent.value} if kind == WRITE else None
                    status, data = cache.access(kind, LINE, words, token=name)
                    if status == "stall":
                        # line mid-eviction: the op retries once the PutAck lands
                        agent.op, agent.value = None, None
                        w.ops_left += 1
                        if kind == WRITE:
                            w.writes -= 1
                        return
                if status == "hit":
                    self._complete(w, name, data if kind != FLUSH else None, res)
        else:
            key = ev[1]
            queue = w.channels[key]
            msg = queue[0]
            if not self._deliver(w, msg, res):
                return
            w.channels[key] = queue[1:]
        self._pump(w, res)

    def enabled(self, w: World, ev) -> bool:
        if ev[0] != "deliver":
            return True
        msg = w.channels[ev[1]][0]
        if isinstance(msg, CohMsg) and msg.dst == HOME and msg.kind in ("GetS", "GetM", "PutM"):
            return msg.line not in w.llc.locks
        return True

    def _deliver(self, w: World, msg, res: ExploreResult) -> bool:
        if isinstance(msg, DmaMsg):
            if msg.dst == DRAM:
                if msg.kind == "DmaWrite":
                    w.dram = (msg.value,) + w.dram[1:]
                    self._send(w, DmaMsg("DmaRsp", DRAM, msg.src))
                else:
                    self._send(w, DmaMsg("DmaRsp", DRAM, msg.src, w.dram[0]))
            elif msg.dst == HOME:
                op = READ if msg.kind == "DmaRead" else WRITE
                words = (msg.value,) if op == WRITE else None
                w.llc.dma_line(msg.src, op, self.mode, LINE, 0, 1, words)
            else:
                agent = w.agents[msg.dst]
                self._complete(w, msg.dst, (msg.value,) if agent.op == READ else None, res)
            return True
        if msg.dst == HOME:
            return w.llc.handle(msg)
        self._l2(w, msg.dst).handle(msg)
        return True

    def _send(self, w: World, msg) -> None:
        key = (msg.src, msg.dst, plane_for_message(msg.msg_class))
        w.channels[key] = w.channels.get(key, ()) + (msg,)

    def _pump(self, w: World, res: ExploreResult) -> None:
        progress = True
        while progress:
            progress = False
            llc = w.llc
            for kind, line, value in llc.applied:
                if kind == WRITE and self.mode == CoherenceMode.COHERENT_DMA:
                    self._set_register(w, value[0])
            llc.applied.clear()
            while llc.dram_out:
                req = llc.dram_out.pop(0)
                progress = True
                if req.op == READ:
                    llc.dram_done(req.token, w.dram)
                else:
                    w.dram = tuple(req.data)
            for token, result in llc.completions:
                value = result[0] if result else None
                self._send(w, DmaMsg("DmaRsp", HOME, token, value))
            llc.completions.clear()
            for msg in llc.outbox:
                self._send(w, msg)
            llc.outbox.clear()
            for cache in w.l2s:
                for msg in cache.outbox:
                    self._send(w, msg)
                cache.outbox.clear()
                for token, data in cache.completions:
                    self._complete(w, token, data, res)
                cache.completions.clear()
            if llc.applied or llc.dram_out:
                progress = True

    # -- checks -------------------------------------------------------------
    def check_state(self, w: World, res: ExploreResult) -> None:
        v = swmr_violation(w.l2s, LINE)
        if v:
            res.swmr_violations.append(v)
        v = directory_violation(w.llc, w.l2s, LINE)
        if v:
            res.directory_violations.append(v)

    def quiescent(self, w: World) -> bool:
        return (not any(w.channels.values()) and not w.llc.busy()
                and not any(c.busy() for c in w.l2s)
                and all(a.op is None for a in w.agents.values()))

    # -- search -------------------------------------------------------------
    def run(self, limit: Optional[int] = None) -> ExploreResult:
        res = ExploreResult(self.mode, self.max_ops)
        start = self.initial()
        seen = {start.key()}
        stack = [start]
        while stack:
            w = stack.pop()
            res.states += 1
            self.check_state(w, res)
            evs = [e for e in self.events(w) if self.enabled(w, e)]
            if not evs:
                res.terminals += 1
                if not self.quiescent(w):
                    res.deadlocks.append(f"stuck with channels "
                                         f"{ {k: v for k, v in w.channels.items() if v} }")
                continue
            for ev in evs:
                nxt = w.clone()
                self.apply(nxt, ev, res)
                res.transitions += 1
                k = nxt.key()
                if k not in seen:
                    seen.add(k)
                    stack.append(nxt)
            if limit is not None and res.states >= limit:
                break
        return res


def explore(mode, max_ops: int = 6, exclusive: bool = False) -> ExploreResult:
    return Explorer(mode, max_ops, exclusive).run()
