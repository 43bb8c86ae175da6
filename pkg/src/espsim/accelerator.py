"""Loosely-coupled accelerator: configure/load/compute/store with ping-pong PLM.

The model is transport-agnostic.  ``cycle`` returns the DMA/P2P actions the
engines want to start this cycle; the socket carries them out and reports
back through ``load_done`` / ``store_done``.  Input and output PLM buffers
are each split in two halves so that loading burst ``k+1`` and storing burst
``k-1`` overlap with computing burst ``k``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple

from .config import WORD_BYTES, AcceleratorParams, CoherenceMode, Position

# register offsets inside the accelerator aperture
REG_CMD = 0x00
REG_STATUS = 0x08
REG_SRC = 0x10
REG_DST = 0x18
REG_MODE = 0x20
REG_P2P_SRC = 0x28   # producer tile index + 1, 0 = load from memory
REG_P2P_DST = 0x30   # consumer tile index + 1, 0 = store to memory
REGISTERS = (REG_CMD, REG_STATUS, REG_SRC, REG_DST, REG_MODE, REG_P2P_SRC, REG_P2P_DST)
CMD_START = 1

CFG, LOAD_ISSUE, LOAD_DONE = "CFG", "LOAD_ISSUE", "LOAD_DONE"
COMPUTE_START, COMPUTE_DONE = "COMPUTE_START", "COMPUTE_DONE"
STORE_ISSUE, STORE_DONE, IRQ = "STORE_ISSUE", "STORE_DONE", "IRQ"


class AcceleratorError(Exception):
    code = "AcceleratorError"


class BadRegisterOffset(AcceleratorError):
    code = "BadRegisterOffset"


class StartWhileRunning(AcceleratorError):
    code = "StartWhileRunning"


class StartWhileUnconfigured(AcceleratorError):
    code = "StartWhileUnconfigured"


class AcceleratorBusy(AcceleratorError):
    code = "AcceleratorBusy"


class GranularityMismatch(AcceleratorError):
    code = "GranularityMismatch"


class Phase(str, Enum):
    IDLE = "idle"
    CONFIG = "config"
    RUNNING = "running"
    DONE = "done"


class Half(str, Enum):
    FREE = "free"
    BUSY = "busy"        # being filled (load) or written (compute)
    FULL = "full"
    DRAINING = "draining"  # being read (compute) or stored


@dataclass
class Action:
    kind: str                       # load, store, p2p_load, p2p_store, irq
    burst: int = 0
    addr: int = 0
    words: int = 0
    data: Optional[List[int]] = None
    peer: Optional[Position] = None
    half: int = 0


def copy_through(words: Sequence[int], out_len: int) -> List[int]:
    """Default compute kernel: repeat/truncate the input to the output length."""
    return [words[i % len(words)] for i in range(out_len)]


@dataclass
class _Progress:
    loads_issued: int = 0
    loads_done: int = 0
    computed: int = 0
    stores_issued: int = 0
    stores_done: int = 0
    computing: Optional[Tuple[int, int, int]] = None    # (in half, out half, burst)
    compute_left: int = 0
    loading: bool = False
    storing: bool = False
    load_stalls: int = 0


class Accelerator:
    def __init__(self, name: str, tile: Position, params: AcceleratorParams,
                 mode: CoherenceMode, transform: Callable = copy_through,
                 timeline: Optional[Callable] = None,
                 peer_params: Optional[Callable[[Position], Optional[AcceleratorParams]]] = None,
                 tile_of_index: Optional[Callable[[int], Position]] = None):
        self.name = name
        self.tile = tile
        self.params = params
        self.mode = CoherenceMode(mode)
        self.transform = transform
        self.timeline = timeline
        self.peer_params = peer_params or (lambda pos: None)
        self.tile_of_index = tile_of_index or (lambda i: None)
        self.phase = Phase.IDLE
        self.regs: Dict[int, int] = {}
        self.invoker: Optional[Position] = None
        self.p2p_src: Optional[Position] = None
        self.p2p_dst: Optional[Position] = None
        self.p2p_credits = 0
        self.words = {"load_mem": 0, "store_mem": 0, "load_p2p": 0, "store_p2p": 0}
        self.runs = 0
        self._reset_run()

    def _reset_run(self) -> None:
        self.prog = _Progress()
        # posted stores whose memory acknowledgement is still outstanding
        self.outstanding_writes = 0
        self.in_halves = [Half.FREE, Half.FREE]
        self.out_halves = [Half.FREE, Half.FREE]
        self.in_data: List[Optional[List[int]]] = [None, None]
        self.out_data: List[Optional[List[int]]] = [None, None]
        self.in_order: Deque[int] = deque()     # filled input halves, burst order
        self.out_order: Deque[int] = deque()    # filled output halves, burst order
        self.in_burst = [0, 0]
        self.out_burst = [0, 0]

    def _event(self, now: int, event: str, detail="") -> None:
        if self.timeline is not None:
            self.timeline(now, self.name, event, detail)

    # -- registers ----------------------------------------------------------
    @property
    def busy(self) -> bool:
        return self.phase == Phase.RUNNING

    def set_coherence_mode(self, mode: CoherenceMode) -> None:
        if self.busy:
            raise AcceleratorBusy(f"{self.name} is running")
        self.mode = CoherenceMode(mode)

    def read_reg(self, offset: int) -> int:
        if offset not in REGISTERS:
            raise BadRegisterOffset(f"{self.name}: offset {offset:#x}")
        if offset == REG_STATUS:
            return list(Phase).index(self.phase)
        if offset == REG_MODE:
            return self.mode.code
        return self.regs.get(offset, 0)

    def write_reg(self, offset: int, value: int, src: Optional[Position] = None,
                  now: int = 0) -> None:
        """Register write from the IO plane; raises :class:`AcceleratorError`."""
        if offset not in REGISTERS or offset == REG_STATUS:
            raise BadRegisterOffset(f"{self.name}: offset {offset:#x}")
        if offset == REG_MODE:
            self.set_coherence_mode(CoherenceMode.from_code(value))
            return
        if offset == REG_CMD:
            if value == CMD_START:
                self.start(src, now)
            return
        if self.busy:
            raise AcceleratorBusy(f"{self.name}: register write while running")
        self.regs[offset] = value
        if self.phase in (Phase.IDLE, Phase.DONE):
            self.phase = Phase.CONFIG

    def start(self, invoker: Optional[Position], now: int) -> None:
        if self.busy:
            raise StartWhileRunning(self.name)
        r = self.regs
        p2p_src = self.tile_of_index(r[REG_P2P_SRC] - 1) if r.get(REG_P2P_SRC) else None
        p2p_dst = self.tile_of_index(r[REG_P2P_DST] - 1) if r.get(REG_P2P_DST) else None
        if (REG_SRC not in r and p2p_src is None) or (REG_DST not in r and p2p_dst is None):
            raise StartWhileUnconfigured(self.name)
        if p2p_src is not None:
            peer = self.peer_params(p2p_src)
            if peer is None or peer.store_burst_words != self.params.burst_len_words:
                raise GranularityMismatch(f"{self.name}: producer burst does not match load burst")
        if p2p_dst is not None:
            peer = self.peer_params(p2p_dst)
            if peer is None or peer.burst_len_words != self.params.store_burst_words:
                raise GranularityMismatch(f"{self.name}: consumer burst does not match store burst")
        self.p2p_src, self.p2p_dst = p2p_src, p2p_dst
        self.invoker = invoker
        self._reset_run()
        self.phase = Phase.RUNNING
        self.runs += 1
        self._event(now, CFG, f"run={self.runs} mode={self.mode.value}")

    # -- data path ----------------------------------------------------------
    def p2p_credit(self) -> None:
        """The bound consumer asked for one burst."""
        self.p2p_credits += 1

    def load_done(self, half: int, data: Sequence[int], now: int) -> None:
        p = self.prog
        assert self.in_halves[half] == Half.BUSY
        self.in_halves[half] = Half.FULL
        self.in_data[half] = list(data)
        self.in_order.append(half)
        p.loading = False
        p.loads_done += 1
        kind = "load_p2p" if self.p2p_src is not None else "load_mem"
        self.words[kind] += len(data)
        self._event(now, LOAD_DONE, self.in_burst[half])

    def store_done(self, half: int, now: int) -> None:
        p = self.prog
        assert self.out_halves[half] == Half.DRAINING
        self.out_halves[half] = Half.FREE
        kind = "store_p2p" if self.p2p_dst is not None else "store_mem"
        self.words[kind] += len(self.out_data[half])
        self.out_data[half] = None
        p.storing = False
        p.stores_done += 1
        self._event(now, STORE_DONE, self.out_burst[half])

    def plm_ok(self) -> bool:
        """No half is claimed by two engines at once."""
        p = self.prog
        if p.computing is not None:
            i, o, _ = p.computing
            if self.in_halves[i] != Half.DRAINING or self.out_halves[o] != Half.BUSY:
                return False
        return (sum(h == Half.BUSY for h in self.in_halves) <= 1
                and sum(h == Half.DRAINING for h in self.out_halves) <= 1)

    def cycle(self, now: int) -> List[Action]:
        if self.phase != Phase.RUNNING:
            return []
        p, prm = self.prog, self.params
        total = prm.total_bursts
        actions: List[Action] = []
        stores: List[Action] = []
        # compute progress
        if p.computing is not None:
            p.compute_left -= 1
            if p.compute_left <= 0:
                i, o, burst = p.computing
                out_len = prm.store_burst_words
                self.out_data[o] = list(self.transform(self.in_data[i], out_len))
                self.in_halves[i] = Half.FREE
                self.in_data[i] = None
                self.out_halves[o] = Half.FULL
                self.out_order.append(o)
                self.out_burst[o] = burst
                p.computing = None
                p.computed += 1
                self._event(now, COMPUTE_DONE, burst)
        # store engine
        if not p.storing and self.out_order:
            o = self.out_order[0]
            if self.p2p_dst is None or self.p2p_credits > 0:
                self.out_order.popleft()
                self.out_halves[o] = Half.DRAINING
                p.storing = True
                burst = self.out_burst[o]
                p.stores_issued += 1
                self._event(now, STORE_ISSUE, burst)
                if self.p2p_dst is not None:
                    self.p2p_credits -= 1
                    stores.append(Action("p2p_store", burst, 0, prm.store_burst_words,
                                          list(self.out_data[o]), self.p2p_dst, o))
                else:
                    addr = self.regs[REG_DST] + burst * prm.store_burst_words * WORD_BYTES
                    stores.append(Action("store", burst, addr, prm.store_burst_words,
                                          list(self.out_data[o]), None, o))
        # compute engine
        if p.computing is None and self.in_order and Half.FREE in self.out_halves:
            i = self.in_order.popleft()
            o = self.out_halves.index(Half.FREE)
            self.in_halves[i] = Half.DRAINING
            self.out_halves[o] = Half.BUSY
            p.computing = (i, o, self.in_burst[i])
            p.compute_left = prm.compute_cycles_per_burst
            self._event(now, COMPUTE_START, self.in_burst[i])
        # load engine
        if not p.loading and p.loads_issued < total:
            if Half.FREE in self.in_halves:
                h = self.in_halves.index(Half.FREE)
                burst = p.loads_issued
                self.in_halves[h] = Half.BUSY
                self.in_burst[h] = burst
                p.loads_issued += 1
                p.loading = True
                self._event(now, LOAD_ISSUE, burst)
                if self.p2p_src is not None:
                    actions.append(Action("p2p_load", burst, 0, prm.burst_len_words, None,
                                          self.p2p_src, h))
                else:
                    addr = self.regs[REG_SRC] + burst * prm.burst_len_words * WORD_BYTES
                    actions.append(Action("load", burst, addr, prm.burst_len_words, None,
                                          None, h))
            else:
                p.load_stalls += 1
        # a one-flit read request goes out ahead of store data issued the same cycle
        actions.extend(stores)
        # completion
        if p.stores_done == total and self.outstanding_writes == 0:
            self.phase = Phase.DONE
            self._event(now, IRQ, f"run={self.runs}")
            actions.append(Action("irq"))
        return actions

    @property
    def working(self) -> bool:
        """True while any engine is mid-operation (used for progress tracking)."""
        return self.phase == Phase.RUNNING and self.prog.computing is not None
