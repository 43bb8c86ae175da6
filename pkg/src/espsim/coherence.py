"""Directory-based MESI: private L2 controllers and LLC/directory slices.

The protocol is directory-centric.  Every request is serialized at the home
LLC slice, which keeps a line locked ("busy") until the transaction is over;
forwarded requests and invalidations are answered to the directory, which
then replies to the requester.  Requests for a busy line are refused and
stay in the network queue (head-of-line), so the protocol relies on requests,
forwards and responses travelling on separate planes.

Both controllers are plain transition functions: messages go in through
``handle``, outgoing messages accumulate in ``outbox``.  The simulator moves
them over the NoC; the exhaustive explorer moves them between FIFO channels.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Set, Tuple

from .config import CacheParams, CoherenceMode, MessageClass

GETS, GETM, PUTM = "GetS", "GetM", "PutM"
FWD_GETS, FWD_GETM, INV, RECALL = "FwdGetS", "FwdGetM", "Inv", "Recall"
DATA, INV_ACK, PUT_ACK = "Data", "InvAck", "PutAck"

MESSAGE_CLASS = {
    GETS: MessageClass.COH_REQ, GETM: MessageClass.COH_REQ, PUTM: MessageClass.COH_REQ,
    FWD_GETS: MessageClass.COH_FWD, FWD_GETM: MessageClass.COH_FWD,
    INV: MessageClass.COH_FWD, RECALL: MessageClass.COH_FWD,
    DATA: MessageClass.COH_RSP, INV_ACK: MessageClass.COH_RSP, PUT_ACK: MessageClass.COH_RSP,
}

READ, WRITE = "read", "write"


class ProtocolError(RuntimeError):
    """A controller received a message its current state cannot accept."""


class MshrFull(Exception):
    """No miss-status register is free; the requester retries next cycle."""


class L2State(str, Enum):
    M = "M"
    E = "E"
    S = "S"
    I = "I"
    IS_D = "IS_D"
    IS_D_I = "IS_D_I"
    IM_D = "IM_D"
    SM_D = "SM_D"
    MI_A = "MI_A"
    II_A = "II_A"


STABLE_VALID = (L2State.M, L2State.E, L2State.S)


@dataclass(frozen=True)
class CohMsg:
    kind: str
    line: int
    src: Any
    dst: Any
    data: Optional[Tuple[int, ...]] = None
    dirty: bool = False
    exclusive: bool = False

    @property
    def msg_class(self) -> MessageClass:
        return MESSAGE_CLASS[self.kind]


# ---------------------------------------------------------------------------
# private L2


@dataclass
class _Line:
    state: L2State
    data: Optional[List[int]] = None


@dataclass
class _Mshr:
    op: str
    token: Any
    words: Optional[Dict[int, int]] = None
    deferred: Optional[CohMsg] = None


@dataclass
class _Evict:
    state: L2State
    data: List[int]
    dirty: bool


class L2Cache:
    """Private MESI cache of one tile.

    ``access`` works at line granularity: a read returns the whole line, a
    write takes ``{word offset: value}``.  It returns ``("hit", data)``,
    ``("miss", None)`` (completion later appears in ``completions`` as
    ``(token, data)``) or ``("stall", None)`` when the line is mid-transition.
    """

    def __init__(self, owner, params: CacheParams, home: Callable[[int], Any],
                 sets: Optional[int] = None, ways: Optional[int] = None):
        self.owner = owner
        self.params = params
        self.home = home
        self.n_sets = sets or params.l2_sets
        self.ways = ways or params.l2_ways
        self.wpl = params.words_per_line
        self.sets: List["OrderedDict[int, _Line]"] = [OrderedDict() for _ in range(self.n_sets)]
        self.mshr: Dict[int, _Mshr] = {}
        self.evicting: Dict[int, _Evict] = {}
        self.flushes: Dict[Any, Set[int]] = {}
        self.outbox: List[CohMsg] = []
        self.completions: List[Tuple[Any, Any]] = []
        self.trace: Optional[Callable] = None
        self.hits = 0
        self.misses = 0

    # -- helpers ------------------------------------------------------------
    def _set(self, line: int) -> "OrderedDict[int, _Line]":
        return self.sets[line % self.n_sets]

    def state_of(self, line: int) -> L2State:
        entry = self._set(line).get(line)
        if entry is not None:
            return entry.state
        if line in self.evicting:
            return self.evicting[line].state
        return L2State.I

    def data_of(self, line: int) -> Optional[Tuple[int, ...]]:
        entry = self._set(line).get(line)
        if entry is None or entry.data is None:
            return None
        return tuple(entry.data)

    def valid_lines(self) -> List[int]:
        return sorted(l for s in self.sets for l, e in s.items() if e.state in STABLE_VALID)

    def busy(self) -> bool:
        return bool(self.mshr or self.evicting or self.flushes)

    def _send(self, kind, line, dst=None, **kw) -> CohMsg:
        msg = CohMsg(kind, line, self.owner, self.home(line) if dst is None else dst, **kw)
        self.outbox.append(msg)
        return msg

    def _log(self, line, old, event, new, sent):
        if self.trace is not None:
            self.trace(self.owner, line, old, event, new, sent)

    def _evict_entry(self, line: int, entry: _Line, event: str) -> None:
        s = self._set(line)
        del s[line]
        if entry.state in (L2State.M, L2State.E):
            dirty = entry.state == L2State.M
            self.evicting[line] = _Evict(L2State.MI_A, list(entry.data), dirty)
            msg = self._send(PUTM, line, data=tuple(entry.data), dirty=dirty)
            self._log(line, entry.state, event, L2State.MI_A, [msg])
        else:
            self._log(line, entry.state, event, L2State.I, [])

    def _allocate(self, line: int, state: L2State) -> Optional[_Line]:
        s = self._set(line)
        if len(s) >= self.ways:
            victim = next((l for l, e in s.items() if e.state in STABLE_VALID), None)
            if victim is None:
                return None
            self._evict_entry(victim, s[victim], "Replace")
        entry = _Line(state)
        s[line] = entry
        return entry

    # -- processor side -----------------------------------------------------
    def access(self, op: str, line: int, words: Optional[Dict[int, int]] = None, token=None):
        if line in self.evicting or line in self.mshr:
            return ("stall", None)
        s = self._set(line)
        entry = s.get(line)
        if entry is not None:
            s.move_to_end(line)
            if op == READ and entry.state in STABLE_VALID:
                self.hits += 1
                return ("hit", tuple(entry.data))
            if op == WRITE and entry.state in (L2State.M, L2State.E):
                self.hits += 1
                old = entry.state
                entry.state = L2State.M
                for off, v in (words or {}).items():
                    entry.data[off] = v
                if old != L2State.M:
                    self._log(line, old, "Store", L2State.M, [])
                return ("hit", tuple(entry.data))
        if len(self.mshr) >= self.params.l2_mshrs:
            raise MshrFull(line)
        self.misses += 1
        if entry is not None and entry.state == L2State.S:
            entry.state = L2State.SM_D
            self.mshr[line] = _Mshr(op, token, dict(words or {}))
            msg = self._send(GETM, line)
            self._log(line, L2State.S, "Store", L2State.SM_D, [msg])
            return ("miss", None)
        new = L2State.IS_D if op == READ else L2State.IM_D
        if self._allocate(line, new) is None:
            return ("stall", None)
        self.mshr[line] = _Mshr(op, token, dict(words or {}))
        msg = self._send(GETS if op == READ else GETM, line)
        self._log(line, L2State.I, "Load" if op == READ else "Store", new, [msg])
        return ("miss", None)

    def flush_line(self, line: int) -> bool:
        """Write back and invalidate one line; True if a PutM was sent."""
        entry = self._set(line).get(line)
        if entry is None or entry.state not in STABLE_VALID:
            return False
        self._evict_entry(line, entry, "Flush")
        return entry.state != L2State.S

    def flush_all(self, token=None):
        """Write back every M/E line and drop S lines.

        Returns ``("hit", None)`` when nothing needed writing back, otherwise
        ``("miss", None)`` with completion once all PutAcks are in.
        """
        pending = set()
        for s in self.sets:
            for line in [l for l, e in s.items() if e.state in STABLE_VALID]:
                if self.flush_line(line):
                    pending.add(line)
        if not pending:
            return ("hit", None)
        self.flushes[token] = pending
        return ("miss", None)

    # -- network side -------------------------------------------------------
    def handle(self, msg: CohMsg) -> None:
        line = msg.line
        kind = msg.kind
        s = self._set(line)
        entry = s.get(line)
        state = self.state_of(line)
        if kind == DATA:
            mshr = self.mshr.pop(line, None)
            if mshr is None or entry is None:
                raise ProtocolError(f"{self.owner}: Data for line {line:#x} in {state.value}")
            data = list(msg.data)
            if state == L2State.IS_D:
                entry.data = data
                entry.state = L2State.E if msg.exclusive else L2State.S
                self.completions.append((mshr.token, tuple(data)))
            elif state == L2State.IS_D_I:
                del s[line]
                self.completions.append((mshr.token, tuple(data)))
            elif state in (L2State.IM_D, L2State.SM_D):
                entry.data = data
                for off, v in mshr.words.items():
                    entry.data[off] = v
                entry.state = L2State.M
                self.completions.append((mshr.token, tuple(entry.data)))
            else:
                raise ProtocolError(f"{self.owner}: Data for line {line:#x} in {state.value}")
            self._log(line, state, DATA, self.state_of(line), [])
            if mshr.deferred is not None:
                self.handle(mshr.deferred)
            return
        if kind == INV:
            new = {L2State.S: L2State.I, L2State.SM_D: L2State.IM_D,
                   L2State.IS_D: L2State.IS_D_I, L2State.IS_D_I: L2State.IS_D_I,
                   L2State.IM_D: L2State.IM_D, L2State.I: L2State.I,
                   L2State.II_A: L2State.II_A}.get(state)
            if new is None:
                raise ProtocolError(f"{self.owner}: Inv for line {line:#x} in {state.value}")
            if state == L2State.S:
                del s[line]
            elif entry is not None and state != L2State.II_A:
                entry.state = new
            ack = self._send(INV_ACK, line, dst=msg.src)
            self._log(line, state, INV, new, [ack])
            return
        if kind in (FWD_GETS, FWD_GETM, RECALL):
            if state in (L2State.M, L2State.E):
                out = self._send(DATA, line, dst=msg.src, data=tuple(entry.data),
                                 dirty=state == L2State.M)
                if kind == FWD_GETS:
                    entry.state = L2State.S
                else:
                    del s[line]
                self._log(line, state, kind, self.state_of(line), [out])
            elif state in (L2State.IM_D, L2State.SM_D, L2State.IS_D):
                # the grant is still in flight on the response plane
                mshr = self.mshr[line]
                if mshr.deferred is not None:
                    raise ProtocolError(f"{self.owner}: second deferred forward on {line:#x}")
                mshr.deferred = msg
                self._log(line, state, kind + "(deferred)", state, [])
            elif state == L2State.MI_A:
                ev = self.evicting[line]
                out = self._send(DATA, line, dst=msg.src, data=tuple(ev.data), dirty=ev.dirty)
                ev.state = L2State.II_A
                self._log(line, state, kind, L2State.II_A, [out])
            else:
                raise ProtocolError(f"{self.owner}: {kind} for line {line:#x} in {state.value}")
            return
        if kind == PUT_ACK:
            if line not in self.evicting:
                raise ProtocolError(f"{self.owner}: PutAck for line {line:#x} in {state.value}")
            del self.evicting[line]
            self._log(line, state, PUT_ACK, L2State.I, [])
            for token, pending in list(self.flushes.items()):
                pending.discard(line)
                if not pending:
                    del self.flushes[token]
                    self.completions.append((token, None))
            return
        raise ProtocolError(f"{self.owner}: unexpected message {kind}")

    def key(self, v=lambda x: x):
        """Hashable snapshot of the controller state; ``v`` renames data values."""
        def d(data):
            return tuple(v(x) for x in data) if data is not None else None
        lines = tuple((l, e.state.value, d(e.data)) for s in self.sets for l, e in sorted(s.items()))
        mshr = tuple((l, m.op, m.token, tuple((o, v(x)) for o, x in sorted(m.words.items())),
                      _msg_key(m.deferred, v)) for l, m in sorted(self.mshr.items()))
        ev = tuple((l, e.state.value, d(e.data), e.dirty) for l, e in sorted(self.evicting.items()))
        fl = tuple(sorted((t, tuple(sorted(p))) for t, p in self.flushes.items()))
        return (lines, mshr, ev, fl)

    def clone(self) -> "L2Cache":
        c = L2Cache.__new__(L2Cache)
        c.__dict__.update(self.__dict__)
        c.sets = [OrderedDict((l, _Line(e.state, list(e.data) if e.data is not None else None))
                              for l, e in s.items()) for s in self.sets]
        c.mshr = {l: _Mshr(m.op, m.token, dict(m.words) if m.words is not None else None,
                           m.deferred) for l, m in self.mshr.items()}
        c.evicting = {l: _Evict(e.state, list(e.data), e.dirty) for l, e in self.evicting.items()}
        c.flushes = {t: set(p) for t, p in self.flushes.items()}
        c.outbox = list(self.outbox)
        c.completions = list(self.completions)
        return c


def _msg_key(msg: Optional[CohMsg], v):
    if msg is None:
        return None
    data = tuple(v(x) for x in msg.data) if msg.data is not None else None
    return (msg.kind, msg.line, msg.src, msg.dst, data, msg.dirty, msg.exclusive)


# ---------------------------------------------------------------------------
# LLC slice with directory


class DirState(str, Enum):
    I = "I"
    V = "V"
    S = "S"
    EM = "EM"


@dataclass
class LlcLine:
    state: DirState = DirState.V
    sharers: Set[Any] = field(default_factory=set)
    owner: Any = None
    data: List[int] = field(default_factory=list)
    dirty: bool = False
    present: bool = False


@dataclass
class DramReq:
    op: str
    line: int
    data: Optional[Tuple[int, ...]] = None
    token: Any = None


@dataclass
class Txn:
    id: int
    kind: str                     # GetS, GetM, dma, evict, flush
    line: int
    requester: Any = None
    phase: str = "start"
    acks: int = 0
    mode: Optional[CoherenceMode] = None
    op: Optional[str] = None
    offset: int = 0
    count: int = 0
    words: Optional[Tuple[int, ...]] = None
    token: Any = None
    result: Any = None


class LlcDirectory:
    """One LLC partition and its directory slice (inclusive of the L2s).

    Requests: ``handle(msg)`` returns False when the line is locked and the
    message must stay queued.  DMA line operations (``dma_line``) and range
    write-backs (``flush_line``) are queued internally instead; their
    completions appear in ``completions`` as ``(token, result)``.  DRAM
    accesses are emitted into ``dram_out`` and resumed by ``dram_done``.
    """

    def __init__(self, tile, params: CacheParams, sets: Optional[int] = None,
                 ways: Optional[int] = None):
        self.tile = tile
        self.params = params
        self.n_sets = sets or params.llc_sets
        self.ways = ways or params.llc_ways
        self.wpl = params.words_per_line
        self.sets: List["OrderedDict[int, LlcLine]"] = [OrderedDict() for _ in range(self.n_sets)]
        self.locks: Dict[int, Txn] = {}
        self.line_waiters: Dict[int, List[Txn]] = {}
        self.set_waiters: Dict[int, List[Txn]] = {}
        self.txns: Dict[int, Txn] = {}
        self.next_id = 0
        self.outbox: List[CohMsg] = []
        self.dram_out: List[DramReq] = []
        self.completions: List[Tuple[Any, Any]] = []
        self.applied: List[Tuple[str, int, Any]] = []   # (op, line, value) at apply time
        self.trace: Optional[Callable] = None
        self.counters: Dict[str, int] = {}

    # -- helpers ------------------------------------------------------------
    def _count(self, name: str, n: int = 1) -> None:
        self.counters[name] = self.counters.get(name, 0) + n

    def _set(self, line: int) -> "OrderedDict[int, LlcLine]":
        return self.sets[line % self.n_sets]

    def entry(self, line: int) -> Optional[LlcLine]:
        return self._set(line).get(line)

    def dir_state(self, line: int) -> DirState:
        e = self.entry(line)
        return e.state if e is not None and e.present else DirState.I

    def busy(self) -> bool:
        return bool(self.txns)

    def _send(self, kind, line, dst, **kw) -> CohMsg:
        msg = CohMsg(kind, line, self.tile, dst, **kw)
        self.outbox.append(msg)
        return msg

    def _log(self, line, old, event, new, sent):
        if self.trace is not None:
            self.trace(self.tile, line, old, event, new, sent)

    def _new_txn(self, kind, line, **kw) -> Txn:
        txn = Txn(self.next_id, kind, line, **kw)
        self.next_id += 1
        self.txns[txn.id] = txn
        return txn

    # -- entry points -------------------------------------------------------
    def handle(self, msg: CohMsg) -> bool:
        line = msg.line
        if msg.kind in (DATA, INV_ACK):
            txn = self.locks.get(line)
            if txn is None or txn.phase != "wait":
                raise ProtocolError(f"LLC {self.tile}: unexpected {msg.kind} for {line:#x}")
            self._on_response(txn, msg)
            return True
        if line in self.locks:
            self._count("refused")
            return False
        if msg.kind == PUTM:
            self._putm(msg)
            return True
        if msg.kind in (GETS, GETM):
            self._count(msg.kind)
            txn = self._new_txn(msg.kind, line, requester=msg.src)
            self.locks[line] = txn
            self._advance(txn)
            return True
        raise ProtocolError(f"LLC {self.tile}: unexpected message {msg.kind}")

    def dma_line(self, token, op: str, mode: CoherenceMode, line: int, offset: int, count: int,
                 words: Optional[Tuple[int, ...]] = None) -> None:
        self._count("dma_" + op)
        txn = self._new_txn("dma", line, mode=mode, op=op, offset=offset, count=count,
                            words=words, token=token)
        self._acquire(txn)

    def flush_line(self, token, line: int) -> None:
        txn = self._new_txn("flush", line, token=token)
        self._acquire(txn)

    def dram_done(self, token, data) -> None:
        txn = self.txns[token]
        e = self.entry(txn.line)
        e.data = list(data)
        e.present = True
        e.state = DirState.V
        e.dirty = False
        txn.phase = "filled"
        self._advance(txn)

    # -- internals ----------------------------------------------------------
    def _acquire(self, txn: Txn) -> None:
        if txn.line in self.locks:
            self.line_waiters.setdefault(txn.line, []).append(txn)
            return
        self.locks[txn.line] = txn
        self._advance(txn)

    def _unlock(self, txn: Txn) -> None:
        del self.locks[txn.line]
        del self.txns[txn.id]
        waiters = self.line_waiters.get(txn.line)
        if waiters:
            nxt = waiters.pop(0)
            if not waiters:
                del self.line_waiters[txn.line]
            self.locks[nxt.line] = nxt
            self._advance(nxt)
        idx = txn.line % self.n_sets
        sw = self.set_waiters.pop(idx, None)
        for w in sw or ():
            self._advance(w)

    def _putm(self, msg: CohMsg) -> None:
        e = self.entry(msg.line)
        old = self.dir_state(msg.line)
        if e is not None and e.present:
            if e.state == DirState.EM and e.owner == msg.src:
                if msg.dirty:
                    e.data = list(msg.data)
                    e.dirty = True
                e.state, e.owner = DirState.V, None
            elif msg.src in e.sharers:
                e.sharers.discard(msg.src)
                if not e.sharers:
                    e.state = DirState.V
        ack = self._send(PUT_ACK, msg.line, msg.src)
        self._log(msg.line, old, f"PutM({msg.src})", self.dir_state(msg.line), [ack])

    def _ensure_present(self, txn: Txn) -> bool:
        """Make the line resident; False while waiting for a way or DRAM."""
        s = self._set(txn.line)
        e = s.get(txn.line)
        if e is not None:
            s.move_to_end(txn.line)
            return e.present
        if len(s) >= self.ways:
            victim = next((l for l in s if l not in self.locks), None)
            idx = txn.line % self.n_sets
            self.set_waiters.setdefault(idx, []).append(txn)
            txn.phase = "way"
            if victim is not None:
                ev = self._new_txn("evict", victim)
                self.locks[victim] = ev
                self._advance(ev)
            return False
        s[txn.line] = LlcLine(present=False)
        txn.phase = "fill"
        self._count("dram_fill")
        self.dram_out.append(DramReq(READ, txn.line, token=txn.id))
        return False

    def _collect(self, txn: Txn, e: LlcLine, fwd_kind: Optional[str], inv_sharers) -> bool:
        """Issue forwards/invalidations; False if responses are now awaited."""
        sent = []
        if fwd_kind is not None:
            sent.append(self._send(fwd_kind, txn.line, e.owner))
            txn.acks = 1
        for sh in sorted(inv_sharers, key=repr):
            sent.append(self._send(INV, txn.line, sh))
            txn.acks += 1
        if sent:
            self._count("fwd_msgs", len(sent))
            txn.phase = "wait"
            self._log(txn.line, e.state, txn.kind, e.state, sent)
            return False
        return True

    def _on_response(self, txn: Txn, msg: CohMsg) -> None:
        e = self.entry(txn.line)
        if msg.kind == DATA:
            if msg.dirty:
                e.data = list(msg.data)
                e.dirty = True
        txn.acks -= 1
        if txn.acks == 0:
            txn.phase = "collected"
            self._advance(txn)

    def _advance(self, txn: Txn) -> None:
        kind = txn.kind
        if kind in ("evict", "flush"):
            self._advance_evict(txn)
            return
        if txn.phase in ("start", "way", "fill", "filled"):
            if txn.phase == "way":
                txn.phase = "start"
            if not self._ensure_present(txn):
                return
            txn.phase = "present"
        e = self.entry(txn.line)
        if kind == GETS:
            self._advance_gets(txn, e)
        elif kind == GETM:
            self._advance_getm(txn, e)
        else:
            self._advance_dma(txn, e)

    def _finish(self, txn: Txn, e: LlcLine, old, event: str, sent) -> None:
        self._log(txn.line, old, event, e.state, sent)
        self._unlock(txn)

    def _advance_gets(self, txn: Txn, e: LlcLine) -> None:
        req = txn.requester
        if txn.phase == "present":
            if e.state == DirState.EM:
                if e.owner == req:
                    raise ProtocolError(f"LLC {self.tile}: GetS from owner {req}")
                txn.result = e.owner
                if not self._collect(txn, e, FWD_GETS, ()):
                    return
        old = e.state
        if e.state == DirState.EM:
            e.state, e.sharers, e.owner = DirState.S, {txn.result}, None
        excl = (self.params.exclusive_on_clean_gets and e.state == DirState.V)
        if excl:
            e.state, e.owner = DirState.EM, req
        else:
            e.state = DirState.S
            e.sharers.add(req)
        out = self._send(DATA, txn.line, req, data=tuple(e.data), exclusive=excl)
        self._finish(txn, e, old, f"GetS({req})", [out])

    def _advance_getm(self, txn: Txn, e: LlcLine) -> None:
        req = txn.requester
        if txn.phase == "present":
            if e.state == DirState.EM:
                if e.owner == req:
                    raise ProtocolError(f"LLC {self.tile}: GetM from owner {req}")
                if not self._collect(txn, e, FWD_GETM, ()):
                    return
            elif e.state == DirState.S:
                if not self._collect(txn, e, None, e.sharers - {req}):
                    return
        old = e.state
        e.state, e.owner, e.sharers = DirState.EM, req, set()
        out = self._send(DATA, txn.line, req, data=tuple(e.data), exclusive=True)
        self._finish(txn, e, old, f"GetM({req})", [out])

    def _advance_dma(self, txn: Txn, e: LlcLine) -> None:
        if txn.phase == "present" and txn.mode == CoherenceMode.COHERENT_DMA:
            if txn.op == READ and e.state == DirState.EM:
                txn.result = e.owner
                if not self._collect(txn, e, FWD_GETS, ()):
                    return
            elif txn.op == WRITE and e.state == DirState.EM:
                txn.result = None
                if not self._collect(txn, e, FWD_GETM, ()):
                    return
            elif txn.op == WRITE and e.state == DirState.S:
                if not self._collect(txn, e, None, e.sharers):
                    return
        old = e.state
        if txn.mode == CoherenceMode.COHERENT_DMA and txn.phase == "collected":
            if txn.op == READ:
                e.state, e.sharers, e.owner = DirState.S, {txn.result}, None
            else:
                e.state, e.sharers, e.owner = DirState.V, set(), None
        lo, hi = txn.offset, txn.offset + txn.count
        if txn.op == READ:
            result = tuple(e.data[lo:hi])
            self.applied.append((READ, txn.line, result))
        else:
            e.data[lo:hi] = list(txn.words)
            e.dirty = True
            result = None
            self.applied.append((WRITE, txn.line, tuple(txn.words)))
        self.completions.append((txn.token, result))
        self._finish(txn, e, old, f"Dma{txn.op.capitalize()}({txn.mode.value})", [])

    def _advance_evict(self, txn: Txn) -> None:
        s = self._set(txn.line)
        e = s.get(txn.line)
        if txn.phase == "start":
            if e is None or not e.present:
                if e is not None:
                    raise ProtocolError(f"LLC {self.tile}: evicting a line still filling")
                self._done_evict(txn)
                return
            if e.state == DirState.EM:
                if not self._collect(txn, e, RECALL, ()):
                    return
            elif e.state == DirState.S:
                if not self._collect(txn, e, None, e.sharers):
                    return
        old = e.state
        if e.dirty:
            self._count("dram_writeback")
            self.dram_out.append(DramReq(WRITE, txn.line, data=tuple(e.data)))
        del s[txn.line]
        self._log(txn.line, old, txn.kind, DirState.I, [])
        self._done_evict(txn)

    def _done_evict(self, txn: Txn) -> None:
        if txn.kind == "flush":
            self.completions.append((txn.token, None))
        self._unlock(txn)

    def key(self, v=lambda x: x):
        lines = tuple((l, e.state.value, tuple(sorted(e.sharers, key=repr)), e.owner,
                       tuple(v(x) for x in e.data), e.dirty, e.present)
                      for s in self.sets for l, e in sorted(s.items()))
        txns = tuple(sorted(((t.kind, t.line, t.requester, t.phase, t.acks, t.op, t.token,
                              t.result, tuple(v(x) for x in t.words) if t.words else None)
                             for t in self.txns.values()), key=repr))
        return (lines, txns)

    def clone(self) -> "LlcDirectory":
        c = LlcDirectory.__new__(LlcDirectory)
        c.__dict__.update(self.__dict__)
        c.sets = [OrderedDict((l, LlcLine(e.state, set(e.sharers), e.owner, list(e.data), e.dirty,
                                          e.present)) for l, e in s.items()) for s in self.sets]
        txns = {i: Txn(**t.__dict__) for i, t in self.txns.items()}
        c.txns = txns
        c.locks = {l: txns[t.id] for l, t in self.locks.items()}
        c.line_waiters = {l: [txns[t.id] for t in ws] for l, ws in self.line_waiters.items()}
        c.set_waiters = {i: [txns[t.id] for t in ws] for i, ws in self.set_waiters.items()}
        c.outbox = list(self.outbox)
        c.dram_out = list(self.dram_out)
        c.completions = list(self.completions)
        c.applied = list(self.applied)
        c.counters = dict(self.counters)
        return c


# ---------------------------------------------------------------------------
# global invariants


def swmr_violation(l2s, line: int) -> Optional[str]:
    """Single-writer/multiple-reader check over the private caches."""
    writers = [c.owner for c in l2s if c.state_of(line) in (L2State.M, L2State.E)]
    readers = [c.owner for c in l2s if c.state_of(line) in (L2State.S, L2State.SM_D)]
    if len(writers) > 1:
        return f"line {line:#x}: several writers {writers}"
    if writers and readers:
        return f"line {line:#x}: writer {writers[0]} with readers {readers}"
    return None


def directory_violation(llc: LlcDirectory, l2s, line: int) -> Optional[str]:
    """Sharer set must cover every holder; EM must name the holder (idle lines only)."""
    if line in llc.locks:
        return None
    state = llc.dir_state(line)
    e = llc.entry(line)
    for c in l2s:
        st = c.state_of(line)
        if st in (L2State.M, L2State.E):
            if state != DirState.EM or e.owner != c.owner:
                return f"line {line:#x}: {c.owner} holds {st.value} but directory is {state.value}"
        elif st in (L2State.S, L2State.SM_D):
            covered = state == DirState.S and c.owner in e.sharers
            covered = covered or (state == DirState.EM and e.owner == c.owner)
            if not covered:
                return f"line {line:#x}: {c.owner} holds S but directory is {state.value}"
    if e is not None and e.present:
        if state == DirState.EM and (e.owner is None or e.sharers):
            return f"line {line:#x}: EM without a single owner"
        if state == DirState.S and not e.sharers:
            return f"line {line:#x}: S with empty sharer set"
    return None
