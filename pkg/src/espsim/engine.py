"""Cycle-stepped simulation kernel.

One ``step`` advances the whole SoC by one cycle in a fixed order: routers,
socket proxies (packet ejection and processor sequencers), caches and LLC
slices, accelerators, DRAM channels, monitors.  Within the NoC every router
decides from the start-of-cycle state before any move is committed, so the
row-major order of tiles cannot create combinational paths.
"""

from __future__ import annotations

import io
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, TextIO, Tuple, Union

from .accelerator import AcceleratorParams
from .config import Position, SocConfig, TileKind, ValidatedSoC, validate_config
from .noc import Noc
from .sockets import (AcceleratorSocket, AuxSocket, BumpAllocator, EmptySocket, MemorySocket,
                      PhysicalMemory, ProcessorSocket, Socket)

STATS_SCHEMA_VERSION = 1
TRACE_LEVELS = ("off", "summary", "timeline", "full")
DEFAULT_DEADLOCK_WINDOW = 10_000


class DeadlockSuspected(RuntimeError):
    """No forward progress for the configured window while work is outstanding."""

    def __init__(self, cycle: int, window: int, dump: dict):
        super().__init__(f"no progress for {window} cycles at cycle {cycle}")
        self.cycle = cycle
        self.window = window
        self.dump = dump


class UnknownStatsVersion(ValueError):
    pass


# ---------------------------------------------------------------------------
# trace sink


class TraceSink:
    """Collects timeline records and, at ``full`` level, detailed trace lines.

    Timeline records are ``(cycle, entity, event, detail)``.  With ``stream``
    set, full-level lines are written there as they happen instead of being
    kept in memory.
    """

    def __init__(self, level: str = "timeline", stream: Optional[TextIO] = None):
        if level not in TRACE_LEVELS:
            raise ValueError(f"trace level must be one of {TRACE_LEVELS}")
        self.level = level
        self.stream = stream
        self.timeline: List[Tuple[int, str, str, str]] = []
        self.lines: List[str] = []

    @property
    def keeps_timeline(self) -> bool:
        return self.level in ("timeline", "full")

    @property
    def full(self) -> bool:
        return self.level == "full"

    def record(self, cycle: int, entity: str, event: str, detail: Any = "") -> None:
        if self.keeps_timeline:
            self.timeline.append((cycle, entity, event, str(detail)))
        if self.full:
            self.line(f"{cycle} {entity} {event} {detail}")

    def line(self, text: str) -> None:
        if self.stream is not None:
            self.stream.write(text + "\n")
        else:
            self.lines.append(text)

    def link(self, cycle, router, plane, port, kind, src, dst) -> None:
        self.line(f"{cycle} link r{router[0]}{router[1]} p{plane} {port} {kind} "
                  f"{src[0]},{src[1]}->{dst[0]},{dst[1]}")

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        buf.write("cycle,entity,event,detail\n")
        for cycle, entity, event, detail in self.timeline:
            detail = detail.replace('"', "'")
            if "," in detail:
                detail = f'"{detail}"'
            buf.write(f"{cycle},{entity},{event},{detail}\n")
        return buf.getvalue()


# ---------------------------------------------------------------------------
# statistics


@dataclass
class Stats:
    cycles: int = 0
    makespan: int = 0
    quiescent: bool = False
    seed: int = 0
    flits_injected: Dict[int, int] = field(default_factory=dict)
    flits_ejected: Dict[int, int] = field(default_factory=dict)
    packets_injected: Dict[int, int] = field(default_factory=dict)
    packets_ejected: Dict[int, int] = field(default_factory=dict)
    link_flits: Dict[str, int] = field(default_factory=dict)
    link_utilization: Dict[str, float] = field(default_factory=dict)
    dram: Dict[str, dict] = field(default_factory=dict)
    accelerators: Dict[str, dict] = field(default_factory=dict)
    invocations: Dict[str, dict] = field(default_factory=dict)
    irq_latency_histogram: Dict[int, int] = field(default_factory=dict)
    llc: Dict[str, dict] = field(default_factory=dict)
    l2: Dict[str, dict] = field(default_factory=dict)
    faults: List[dict] = field(default_factory=list)
    warnings: List[dict] = field(default_factory=list)
    shortcuts: Dict[str, int] = field(default_factory=dict)

    def conservation_ok(self) -> bool:
        return (self.flits_injected == self.flits_ejected
                and self.packets_injected == self.packets_ejected)

    def to_dict(self) -> dict:
        d = {"schema_version": STATS_SCHEMA_VERSION}
        for k, v in self.__dict__.items():
            if isinstance(v, dict):
                v = {str(kk): vv for kk, vv in sorted(v.items(), key=lambda x: str(x[0]))}
            d[k] = v
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def read_stats(source: Union[str, Path, dict]) -> dict:
    """Load a stats document, refusing schema versions this code does not know."""
    data = source if isinstance(source, dict) else json.loads(Path(source).read_text())
    version = data.get("schema_version")
    if version != STATS_SCHEMA_VERSION:
        raise UnknownStatsVersion(f"stats schema version {version!r} is not supported "
                                  f"(expected {STATS_SCHEMA_VERSION})")
    return data


# ---------------------------------------------------------------------------
# simulator


class Simulator:
    def __init__(self, config: Union[SocConfig, ValidatedSoC], trace: Optional[TraceSink] = None,
                 seed: Optional[int] = None, deadlock_window: int = DEFAULT_DEADLOCK_WINDOW):
        self.vsoc = validate_config(config)
        cfg = self.vsoc.config
        self.seed = cfg.seed if seed is None else seed
        self.trace = trace if trace is not None else TraceSink("off")
        self.deadlock_window = deadlock_window
        self.now = 0
        self.memory = PhysicalMemory()
        self.allocator = BumpAllocator(self.vsoc)
        self.noc = Noc(cfg.rows, cfg.cols, cfg.noc, trace=self.trace if self.trace.full else None)
        self.faults: List[dict] = []
        self.warnings: List[dict] = []
        self.irq_latencies: Counter = Counter()
        self.progress = 0
        self._ops_seen = 0
        self.positions = [t.position for t in cfg.tiles]
        self.aux_position = cfg.tiles_of(TileKind.AUXILIARY)[0].position
        self.sockets: List[Socket] = []
        workload = self.vsoc.workload
        for t in cfg.tiles:
            if t.kind == TileKind.PROCESSOR:
                s = ProcessorSocket(self, t.position, t.name,
                                    workload.script_for(t.position) if workload else ())
            elif t.kind == TileKind.ACCELERATOR:
                s = AcceleratorSocket(self, t.position, t.name, t)
            elif t.kind == TileKind.MEMORY:
                s = MemorySocket(self, t.position, t.name)
            elif t.kind == TileKind.AUXILIARY:
                s = AuxSocket(self, t.position, t.name)
            else:
                s = EmptySocket(self, t.position, t.name)
            self.sockets.append(s)
        self.by_pos = {s.pos: s for s in self.sockets}
        self.by_name = {s.name: s for s in self.sockets}
        self.processors = [s for s in self.sockets if isinstance(s, ProcessorSocket)]
        self.accelerator_sockets = [s for s in self.sockets if isinstance(s, AcceleratorSocket)]
        self.memories = [s for s in self.sockets if isinstance(s, MemorySocket)]

    # -- services used by the sockets ---------------------------------------
    def timeline_event(self, entity: str, event: str, detail: Any = "") -> None:
        self.trace.record(self.now, entity, event, detail)

    def accel_event(self, cycle: int, entity: str, event: str, detail: Any = "") -> None:
        self.progress += 1
        self.trace.record(cycle, entity, event, detail)

    def coherence_trace(self, who, line, old, event, new, sent) -> None:
        if self.trace.full:
            old = getattr(old, "value", old)
            new = getattr(new, "value", new)
            msgs = " ".join(f"{m.kind}->{m.dst}" for m in sent)
            self.trace.line(f"{self.now} coh {who} line={line:#x} {old} --{event}--> {new} "
                            f"[{msgs}]")

    def fault(self, entity: str, code: str, detail: str) -> None:
        self.faults.append({"cycle": self.now, "entity": entity, "code": code,
                            "detail": detail})
        self.trace.record(self.now, entity, code, detail)

    def warn(self, entity: str, code: str, detail: str) -> None:
        self.warnings.append({"cycle": self.now, "entity": entity, "code": code,
                              "detail": detail})
        self.trace.record(self.now, entity, code, detail)

    def irq_received(self, proc: ProcessorSocket, acc: Position, raised: Optional[int]) -> None:
        if raised is not None:
            self.irq_latencies[self.now - raised] += 1

    def accel_params_at(self, pos: Position) -> Optional[AcceleratorParams]:
        s = self.by_pos.get(pos)
        return s.acc.params if isinstance(s, AcceleratorSocket) else None

    def position_of_index(self, index: int) -> Optional[Position]:
        return self.positions[index] if 0 <= index < len(self.positions) else None

    def index_of_position(self, pos: Position) -> int:
        return self.positions.index(pos)

    def barrier_open(self, count: int) -> bool:
        return all(p.barriers >= count or p.finished for p in self.processors)

    # -- stepping ------------------------------------------------------------
    def step(self) -> None:
        now = self.now
        noc = self.noc
        moved = noc.step()
        planes = range(1, noc.planes + 1)
        for s in self.sockets:
            if s.local:
                s.drain_local()
            for plane in planes:
                pkt = noc.peek_ejected(s.pos, plane)
                if pkt is not None and s.deliver(pkt):
                    noc.pop_ejected(s.pos, plane)
                    self.progress += 1
            s.proxy_step(now)
        for s in self.sockets:
            s.cache_step(now)
        for s in self.accelerator_sockets:
            s.accel_step(now)
            if s.acc.working:
                self.progress += 1
        for s in self.memories:
            before = s.dram.completed
            s.dram_step(now)
            self.progress += s.dram.completed - before
        ops = sum(p.ops_done for p in self.processors)
        self.progress += moved + ops - self._ops_seen
        self._ops_seen = ops
        self.now += 1

    def busy(self) -> bool:
        return not self.noc.idle() or any(s.busy() for s in self.sockets)

    def dump_state(self) -> dict:
        return {"cycle": self.now, "flits_in_flight": self.noc.flits_in_flight(),
                "ejected_waiting": self.noc.pending_packets(),
                "tiles": [s.describe() for s in self.sockets if s.busy()]}

    def run_until_quiescent(self, max_cycles: int = 10_000_000) -> Stats:
        if max_cycles <= 0:
            raise ValueError("max_cycles must be positive")
        last = self.progress
        stalled_since = self.now
        end = self.now + max_cycles
        while self.busy():
            if self.now >= end:
                return self.stats(quiescent=False)
            self.step()
            if self.progress != last:
                last = self.progress
                stalled_since = self.now
            elif self.now - stalled_since >= self.deadlock_window:
                raise DeadlockSuspected(self.now, self.deadlock_window, self.dump_state())
        return self.stats(quiescent=True)

    # -- results ------------------------------------------------------------
    def stats(self, quiescent: bool = True) -> Stats:
        ns = self.noc.stats
        cycles = max(self.now, 1)
        st = Stats(cycles=self.now, quiescent=quiescent, seed=self.seed)
        st.flits_injected = dict(ns.injected_flits)
        st.flits_ejected = dict(ns.ejected_flits)
        st.packets_injected = dict(ns.injected_packets)
        st.packets_ejected = dict(ns.ejected_packets)
        for (pos, port, plane), n in sorted(ns.link_flits.items()):
            key = f"{pos[0]},{pos[1]}:{port}:p{plane}"
            st.link_flits[key] = n
            st.link_utilization[key] = round(n / cycles, 6)
        for m in self.memories:
            d = m.dram
            st.dram[m.name] = {"busy_cycles": d.busy_cycles,
                               "mean_queue_depth": round(d.mean_queue_depth, 6),
                               "words_read": d.words_read, "words_written": d.words_written,
                               "requests": d.completed}
            st.llc[m.name] = dict(sorted(m.llc.counters.items()))
        for s in self.accelerator_sockets:
            a = s.acc
            entry = {"runs": a.runs, "phase": a.phase.value,
                     "load_stalls": a.prog.load_stalls,
                     "dma_load_words_mem": a.words["load_mem"],
                     "dma_store_words_mem": a.words["store_mem"],
                     "p2p_load_words": a.words["load_p2p"],
                     "p2p_store_words": a.words["store_p2p"]}
            served = {"read": 0, "write": 0}
            for m in self.memories:
                for (src, rw), n in m.dma_words.items():
                    if src == s.pos:
                        served[rw] += n
            entry["memory_tile_read_words"] = served["read"]
            entry["memory_tile_write_words"] = served["write"]
            st.accelerators[s.name] = entry
        last_done = 0
        for p in self.processors:
            st.l2[p.name] = {"hits": p.l2.cache.hits, "misses": p.l2.cache.misses}
            for i, rec in enumerate(p.run_log):
                for name, r in rec["invocations"].items():
                    st.invocations[name] = {"start": r["start"], "done": r["done"],
                                            "makespan": r["done"] - r["start"],
                                            "esp_run": f"{p.name}#{i}"}
                last_done = max(last_done, rec["done"])
        for s in self.accelerator_sockets:
            st.l2[s.name] = {"hits": s.l2.cache.hits, "misses": s.l2.cache.misses}
        st.makespan = last_done if any(p.run_log for p in self.processors) else self.now
        st.irq_latency_histogram = dict(sorted(self.irq_latencies.items()))
        st.faults = list(self.faults)
        st.warnings = list(self.warnings)
        st.shortcuts = {s.name: s.shortcuts for s in self.sockets if s.shortcuts}
        return st


def simulate(config, trace: Optional[TraceSink] = None, seed: Optional[int] = None,
             max_cycles: int = 10_000_000,
             deadlock_window: int = DEFAULT_DEADLOCK_WINDOW) -> Tuple[Simulator, Stats]:
    sim = Simulator(config, trace=trace, seed=seed, deadlock_window=deadlock_window)
    return sim, sim.run_until_quiescent(max_cycles)
