"""SoC description: parsing, validation and elaboration.

A configuration is a JSON document with the top-level keys ``grid``,
``tiles``, ``noc``, ``cache``, ``dram``, ``accelerators``, ``workload`` and
``seed``.  Unknown keys anywhere are rejected.  Validation collects every
violation instead of stopping at the first one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

Position = Tuple[int, int]

KIB = 1024
MIB = 1024 * KIB
GIB = 1024 * MIB
APERTURE_SIZE = 64 * KIB
WORD_BYTES = 8


class TileKind(str, Enum):
    PROCESSOR = "cpu"
    ACCELERATOR = "acc"
    MEMORY = "mem"
    AUXILIARY = "aux"
    EMPTY = "empty"


class CoherenceMode(str, Enum):
    FULLY_COHERENT = "fully_coherent"
    COHERENT_DMA = "coherent_dma"
    LLC_COHERENT_DMA = "llc_coherent_dma"
    NON_COHERENT_DMA = "non_coherent_dma"

    @property
    def code(self) -> int:
        return list(CoherenceMode).index(self)

    @classmethod
    def from_code(cls, code: int) -> "CoherenceMode":
        return list(cls)[code]

    @property
    def hardware_coherent(self) -> bool:
        return self in (CoherenceMode.FULLY_COHERENT, CoherenceMode.COHERENT_DMA)


class MessageClass(str, Enum):
    COH_REQ = "coh_req"
    COH_FWD = "coh_fwd"
    COH_RSP = "coh_rsp"
    DMA_REQ = "dma_req"
    DMA_RSP = "dma_rsp"
    IO_IRQ = "io_irq"


DEFAULT_PLANE_MAP: Dict[MessageClass, int] = {
    MessageClass.COH_REQ: 1,
    MessageClass.COH_FWD: 2,
    MessageClass.COH_RSP: 3,
    MessageClass.DMA_REQ: 4,
    MessageClass.IO_IRQ: 5,
    MessageClass.DMA_RSP: 6,
}


def plane_for_message(msg_class: MessageClass,
                      plane_map: Optional[Dict[MessageClass, int]] = None) -> int:
    """Return the NoC plane (1-based) that carries ``msg_class``."""
    return (plane_map or DEFAULT_PLANE_MAP)[MessageClass(msg_class)]


class Port(IntEnum):
    """Router ports, in the fixed traversal order used for tie-breaking."""
    N = 0
    E = 1
    S = 2
    W = 3
    LOCAL = 4

    @property
    def opposite(self) -> "Port":
        return _OPPOSITE[self]

    @property
    def delta(self) -> Position:
        return _DELTA[self]


_OPPOSITE = {Port.N: Port.S, Port.S: Port.N, Port.E: Port.W, Port.W: Port.E,
             Port.LOCAL: Port.LOCAL}
_DELTA = {Port.N: (-1, 0), Port.S: (1, 0), Port.E: (0, 1), Port.W: (0, -1),
          Port.LOCAL: (0, 0)}


def xy_port(current: Position, dst: Position) -> Port:
    """Dimension-ordered next hop: correct the column first, then the row."""
    (r, c), (dr, dc) = current, dst
    if dc > c:
        return Port.E
    if dc < c:
        return Port.W
    if dr > r:
        return Port.S
    if dr < r:
        return Port.N
    return Port.LOCAL


def step(pos: Position, port: Port) -> Position:
    d = port.delta
    return (pos[0] + d[0], pos[1] + d[1])


def hops(src: Position, dst: Position) -> int:
    return abs(src[0] - dst[0]) + abs(src[1] - dst[1])


# ---------------------------------------------------------------------------
# errors


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


class ConfigError(Exception):
    """Raised with the full list of violations found in a configuration."""

    def __init__(self, violations: List[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))

    @property
    def codes(self) -> List[str]:
        return [v.code for v in self.violations]


class ConfigParseError(Exception):
    """The configuration file could not be read or is not valid JSON."""


class IndivisibleDramSize(ConfigError):
    pass


# ---------------------------------------------------------------------------
# parameter records


@dataclass(frozen=True)
class NocParams:
    planes: int = 6
    flit_width_bits: int = 64
    input_queue_depth_flits: int = 4
    eject_queue_packets: int = 4
    # test hook: overrides the class -> plane assignment
    plane_map: Tuple[Tuple[MessageClass, int], ...] = ()

    @property
    def plane_table(self) -> Dict[MessageClass, int]:
        table = dict(DEFAULT_PLANE_MAP)
        table.update(dict(self.plane_map))
        return table

    def flits_for_words(self, words: int) -> int:
        if words <= 0:
            return 1
        bits = words * WORD_BYTES * 8
        return 1 + -(-bits // self.flit_width_bits)


@dataclass(frozen=True)
class CacheParams:
    line_size_bytes: int = 64
    l2_size_bytes: int = 32 * KIB
    l2_ways: int = 4
    l2_mshrs: int = 4
    llc_size_bytes: int = 256 * KIB
    llc_ways: int = 8
    llc_latency: int = 4
    exclusive_on_clean_gets: bool = False

    @property
    def words_per_line(self) -> int:
        return self.line_size_bytes // WORD_BYTES

    @property
    def l2_sets(self) -> int:
        return self.l2_size_bytes // (self.line_size_bytes * self.l2_ways)

    @property
    def llc_sets(self) -> int:
        return self.llc_size_bytes // (self.line_size_bytes * self.llc_ways)


@dataclass(frozen=True)
class DramParams:
    base: int = 0x8000_0000
    size: int = 1 * GIB
    latency: int = 30
    bandwidth_words: int = 1


@dataclass(frozen=True)
class AcceleratorParams:
    id: str
    burst_len_words: int = 64
    num_bursts: int = 16
    compute_cycles_per_burst: int = 100
    plm_words: int = 128
    batches: int = 1
    output_ratio: Fraction = Fraction(1)

    @property
    def store_burst_words(self) -> int:
        return int(self.burst_len_words * self.output_ratio)

    @property
    def total_bursts(self) -> int:
        return self.num_bursts * self.batches

    @property
    def input_words(self) -> int:
        return self.total_bursts * self.burst_len_words

    @property
    def output_words(self) -> int:
        return self.total_bursts * self.store_burst_words


@dataclass(frozen=True)
class TileSpec:
    kind: TileKind
    position: Position
    name: str
    accel_params: Optional[AcceleratorParams] = None
    coherence_mode: Optional[CoherenceMode] = None
    accel_ref: Optional[str] = None


@dataclass(frozen=True)
class SocConfig:
    rows: int
    cols: int
    tiles: Tuple[TileSpec, ...]
    noc: NocParams = NocParams()
    cache: CacheParams = CacheParams()
    dram: DramParams = DramParams()
    accelerators: Tuple[AcceleratorParams, ...] = ()
    workload: Any = None
    seed: int = 0

    def tile_at(self, pos: Position) -> TileSpec:
        return self.tiles[pos[0] * self.cols + pos[1]]

    def tiles_of(self, kind: TileKind) -> List[TileSpec]:
        return [t for t in self.tiles if t.kind == kind]

    def tile_named(self, name: str) -> TileSpec:
        for t in self.tiles:
            if t.name == name:
                return t
        raise KeyError(name)


@dataclass(frozen=True)
class ValidatedSoC:
    config: SocConfig
    memory_map: "MemoryMap"
    routing: "RoutingTables"
    workload: Any = None

    # convenience passthroughs
    @property
    def rows(self) -> int:
        return self.config.rows

    @property
    def cols(self) -> int:
        return self.config.cols

    @property
    def positions(self) -> List[Position]:
        return [(r, c) for r in range(self.rows) for c in range(self.cols)]


# ---------------------------------------------------------------------------
# parsing


_TOP_KEYS = {"grid", "tiles", "noc", "cache", "dram", "accelerators", "workload", "seed"}
_GRID_KEYS = {"rows", "cols"}
_NOC_KEYS = {"planes", "flit_width_bits", "input_queue_depth_flits",
             "eject_queue_packets", "plane_map"}
_CACHE_KEYS = {"line_size_bytes", "l2_size_bytes", "l2_ways", "l2_mshrs",
               "llc_size_bytes", "llc_ways", "llc_latency", "exclusive_on_clean_gets"}
_DRAM_KEYS = {"base", "size", "latency", "bandwidth_words"}
_ACC_KEYS = {"burst_len_words", "num_bursts", "compute_cycles_per_burst",
             "plm_words", "batches", "output_ratio"}
_TILE_KEYS = {"kind", "name", "model", "mode"}


def parse_int(value: Any) -> int:
    """Accept JSON integers and hexadecimal/decimal strings (``"0x8000_0000"``)."""
    if isinstance(value, bool):
        raise ValueError(f"expected integer, got {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        return int(value.replace("_", ""), 0)
    raise ValueError(f"expected integer, got {value!r}")


def _check_keys(where: str, data: Any, allowed: set, out: List[Violation]) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        out.append(Violation("BadValue", f"{where} must be an object"))
        return {}
    for key in sorted(set(data) - allowed):
        out.append(Violation("UnknownKey", f"unknown key {where}.{key}"))
    return data


def _ints(where: str, data: dict, keys, out: List[Violation]) -> dict:
    result = {}
    for key in keys:
        if key in data:
            try:
                result[key] = parse_int(data[key])
            except ValueError as exc:
                out.append(Violation("BadValue", f"{where}.{key}: {exc}"))
    return result


def parse_config(data: Any) -> SocConfig:
    """Build a :class:`SocConfig` from the decoded JSON tree (strict)."""
    out: List[Violation] = []
    top = _check_keys("config", data, _TOP_KEYS, out)
    if not isinstance(data, dict):
        raise ConfigError(out)

    grid = _check_keys("grid", top.get("grid"), _GRID_KEYS, out)
    if "grid" not in top:
        out.append(Violation("BadValue", "missing grid"))
    g = _ints("grid", grid, _GRID_KEYS, out)
    rows, cols = g.get("rows", 0), g.get("cols", 0)
    if rows <= 0 or cols <= 0:
        out.append(Violation("BadValue", "grid.rows and grid.cols must be positive"))

    noc_raw = _check_keys("noc", top.get("noc"), _NOC_KEYS, out)
    noc_kw = _ints("noc", noc_raw, _NOC_KEYS - {"plane_map"}, out)
    plane_map: List[Tuple[MessageClass, int]] = []
    for cls_name, plane in sorted((noc_raw.get("plane_map") or {}).items()):
        try:
            plane_map.append((MessageClass(cls_name), parse_int(plane)))
        except ValueError:
            out.append(Violation("BadValue", f"noc.plane_map: bad entry {cls_name!r}"))
    noc = NocParams(plane_map=tuple(plane_map), **noc_kw)

    cache_raw = _check_keys("cache", top.get("cache"), _CACHE_KEYS, out)
    cache_kw: Dict[str, Any] = _ints("cache", cache_raw,
                                     _CACHE_KEYS - {"exclusive_on_clean_gets"}, out)
    if "exclusive_on_clean_gets" in cache_raw:
        cache_kw["exclusive_on_clean_gets"] = bool(cache_raw["exclusive_on_clean_gets"])
    cache = CacheParams(**cache_kw)

    dram_raw = _check_keys("dram", top.get("dram"), _DRAM_KEYS, out)
    dram = DramParams(**_ints("dram", dram_raw, _DRAM_KEYS, out))

    accels: Dict[str, AcceleratorParams] = {}
    acc_raw = top.get("accelerators") or {}
    if not isinstance(acc_raw, dict):
        out.append(Violation("BadValue", "accelerators must be an object"))
        acc_raw = {}
    for acc_id, params in acc_raw.items():
        p = _check_keys(f"accelerators.{acc_id}", params, _ACC_KEYS, out)
        kw: Dict[str, Any] = _ints(f"accelerators.{acc_id}", p, _ACC_KEYS - {"output_ratio"}, out)
        if "output_ratio" in p:
            try:
                kw["output_ratio"] = Fraction(str(p["output_ratio"]))
            except (ValueError, ZeroDivisionError):
                out.append(Violation("BadValue", f"accelerators.{acc_id}.output_ratio"))
        accels[acc_id] = AcceleratorParams(id=acc_id, **kw)

    tiles: List[TileSpec] = []
    raw_tiles = top.get("tiles")
    if not isinstance(raw_tiles, list):
        out.append(Violation("BadValue", "tiles must be a list of rows"))
        raw_tiles = []
    counters: Dict[TileKind, int] = {}
    flat = []
    for r, row in enumerate(raw_tiles):
        if not isinstance(row, list):
            out.append(Violation("BadValue", f"tiles[{r}] must be a list"))
            continue
        for c, entry in enumerate(row):
            flat.append(((r, c), entry))
    for pos, entry in flat:
        if isinstance(entry, str):
            entry = {"kind": entry}
        entry = _check_keys(f"tiles{list(pos)}", entry, _TILE_KEYS, out)
        try:
            kind = TileKind(entry.get("kind"))
        except ValueError:
            out.append(Violation("BadValue", f"tile {pos}: unknown kind {entry.get('kind')!r}"))
            continue
        index = counters.get(kind, 0)
        counters[kind] = index + 1
        default_name = "aux" if kind == TileKind.AUXILIARY else f"{kind.value}{index}"
        mode = None
        if "mode" in entry:
            try:
                mode = CoherenceMode(entry["mode"])
            except ValueError:
                out.append(Violation("BadValue", f"tile {pos}: unknown mode {entry['mode']!r}"))
        ref = entry.get("model")
        tiles.append(TileSpec(kind=kind, position=pos, name=entry.get("name", default_name),
                              accel_params=accels.get(ref) if ref else None,
                              coherence_mode=mode, accel_ref=ref))

    seed = 0
    if "seed" in top:
        try:
            seed = parse_int(top["seed"])
        except ValueError as exc:
            out.append(Violation("BadValue", f"seed: {exc}"))
    if out:
        raise ConfigError(out)
    return SocConfig(rows=rows, cols=cols, tiles=tuple(tiles), noc=noc, cache=cache,
                     dram=dram, accelerators=tuple(accels.values()),
                     workload=top.get("workload"), seed=seed & (2**64 - 1))


def load_config(path) -> SocConfig:
    """Read and parse a configuration file.

    Raises :class:`ConfigParseError` for unreadable or malformed files and
    :class:`ConfigError` for schema violations.
    """
    try:
        text = Path(path).read_text()
        data = json.loads(text)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigParseError(f"{path}: {exc}") from exc
    return parse_config(data)


# ---------------------------------------------------------------------------
# validation and elaboration


def _structural_violations(cfg: SocConfig) -> List[Violation]:
    out: List[Violation] = []
    if cfg.rows * cfg.cols != len(cfg.tiles):
        out.append(Violation("GridMismatch",
                             f"grid is {cfg.rows}x{cfg.cols} but {len(cfg.tiles)} tiles given"))
    for t in cfg.tiles:
        if not (0 <= t.position[0] < cfg.rows and 0 <= t.position[1] < cfg.cols):
            out.append(Violation("GridMismatch", f"tile {t.name} at {t.position} outside grid"))
    aux = cfg.tiles_of(TileKind.AUXILIARY)
    if not aux:
        out.append(Violation("NoAuxTile", "no auxiliary tile"))
    elif len(aux) > 1:
        where = ", ".join(str(t.position) for t in aux)
        out.append(Violation("MultipleAuxTiles", f"auxiliary tiles at {where}"))
    if not cfg.tiles_of(TileKind.PROCESSOR):
        out.append(Violation("NoProcessorTile", "no processor tile"))
    n_mem = len(cfg.tiles_of(TileKind.MEMORY))
    if not 1 <= n_mem <= 4:
        out.append(Violation("MemoryTileCountOutOfRange",
                             f"{n_mem} memory tiles; must be between 1 and 4"))
    known = {a.id for a in cfg.accelerators}
    names = set()
    for t in cfg.tiles:
        if t.name in names:
            out.append(Violation("DuplicateTileName", f"tile name {t.name!r} used twice"))
        names.add(t.name)
        if t.kind == TileKind.ACCELERATOR:
            if t.accel_ref is None or t.accel_ref not in known:
                out.append(Violation("UnknownAcceleratorRef",
                                     f"tile {t.name} references unknown accelerator {t.accel_ref!r}"))
            if t.coherence_mode is None:
                out.append(Violation("MissingCoherenceMode", f"accelerator tile {t.name} has no mode"))
        else:
            if t.coherence_mode is not None or t.accel_ref is not None:
                out.append(Violation("ModeOnNonAccelerator",
                                     f"tile {t.name} is not an accelerator but has model/mode"))
    for a in cfg.accelerators:
        counts = (a.burst_len_words, a.num_bursts, a.compute_cycles_per_burst, a.plm_words,
                  a.batches)
        if min(counts) <= 0 or a.output_ratio <= 0:
            out.append(Violation("BadAcceleratorParams", f"{a.id}: counts must be positive"))
        elif a.plm_words < 2 * a.burst_len_words:
            out.append(Violation("BadAcceleratorParams",
                                 f"{a.id}: plm_words must hold two bursts (ping-pong)"))
        elif (a.burst_len_words * a.output_ratio).denominator != 1:
            out.append(Violation("BadAcceleratorParams",
                                 f"{a.id}: burst_len_words * output_ratio must be whole"))
    n = cfg.noc
    if n.planes < 6:
        out.append(Violation("TooFewPlanes", f"{n.planes} planes; six are required"))
    if n.flit_width_bits <= 0 or n.input_queue_depth_flits <= 0 or n.eject_queue_packets <= 0:
        out.append(Violation("BadValue", "noc parameters must be positive"))
    for cls, plane in n.plane_map:
        if not 1 <= plane <= n.planes:
            out.append(Violation("BadValue", f"noc.plane_map: plane {plane} out of range"))
    c = cfg.cache
    if c.line_size_bytes % WORD_BYTES or c.line_size_bytes <= 0:
        out.append(Violation("BadValue", "cache.line_size_bytes must be a multiple of 8"))
    elif c.l2_sets <= 0 or c.llc_sets <= 0 or c.l2_mshrs <= 0:
        out.append(Violation("BadValue", "cache sizes too small for their associativity"))
    d = cfg.dram
    if d.size <= 0 or d.latency < 0 or d.bandwidth_words <= 0 or d.base < 0:
        out.append(Violation("BadValue", "dram parameters out of range"))
    n_ap = sum(1 for t in cfg.tiles if t.kind != TileKind.EMPTY)
    if d.base < n_ap * APERTURE_SIZE:
        out.append(Violation("BadValue", "dram.base leaves no room for register apertures"))
    return out


def validate_config(raw) -> ValidatedSoC:
    """Check every constraint on ``raw`` and elaborate it.

    Accepts a :class:`SocConfig` or an already validated SoC (idempotent).
    Raises :class:`ConfigError` listing all violations.
    """
    cfg = raw.config if isinstance(raw, ValidatedSoC) else raw
    violations = _structural_violations(cfg)
    if violations:
        raise ConfigError(violations)
    mmap = _memory_map(cfg)
    routing = _routing_tables(cfg)
    vsoc = ValidatedSoC(config=cfg, memory_map=mmap, routing=routing)
    from .workload import parse_workload  # workload semantics live with the sockets

    workload = parse_workload(vsoc, cfg.workload)
    return ValidatedSoC(config=cfg, memory_map=mmap, routing=routing, workload=workload)


@dataclass(frozen=True)
class Partition:
    tile: Position
    base: int
    size: int

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end


@dataclass(frozen=True)
class MemoryMap:
    dram_base: int
    dram_size: int
    partitions: Tuple[Partition, ...]
    register_apertures: Tuple[Tuple[Position, int, int], ...]

    def memory_tile_for(self, addr: int) -> Optional[Position]:
        for p in self.partitions:
            if p.contains(addr):
                return p.tile
        return None

    def partition_for(self, addr: int) -> Optional[Partition]:
        for p in self.partitions:
            if p.contains(addr):
                return p
        return None

    def aperture(self, tile: Position) -> Tuple[int, int]:
        for pos, base, size in self.register_apertures:
            if pos == tile:
                return base, size
        raise KeyError(tile)

    def aperture_owner(self, addr: int) -> Optional[Tuple[Position, int]]:
        for pos, base, size in self.register_apertures:
            if base <= addr < base + size:
                return pos, addr - base
        return None

    def in_dram(self, addr: int) -> bool:
        return self.dram_base <= addr < self.dram_base + self.dram_size


def _memory_map(cfg: SocConfig) -> MemoryMap:
    mem = cfg.tiles_of(TileKind.MEMORY)
    d = cfg.dram
    line = cfg.cache.line_size_bytes
    if d.size % len(mem) or (d.size // len(mem)) % line:
        raise IndivisibleDramSize([Violation(
            "IndivisibleDramSize",
            f"dram size {d.size:#x} cannot be split evenly across {len(mem)} memory tiles")])
    part = d.size // len(mem)
    partitions = tuple(Partition(t.position, d.base + i * part, part) for i, t in enumerate(mem))
    non_empty = [t for t in cfg.tiles if t.kind != TileKind.EMPTY]
    first = d.base - len(non_empty) * APERTURE_SIZE
    apertures = tuple((t.position, first + i * APERTURE_SIZE, APERTURE_SIZE)
                      for i, t in enumerate(non_empty))
    return MemoryMap(d.base, d.size, partitions, apertures)


def build_memory_map(cfg: ValidatedSoC) -> MemoryMap:
    return _memory_map(cfg.config if isinstance(cfg, ValidatedSoC) else cfg)


@dataclass(frozen=True)
class RoutingTables:
    rows: int
    cols: int
    table: Dict[Position, Dict[Position, Port]] = field(hash=False, compare=True)

    def port(self, router: Position, dst: Position) -> Port:
        return self.table[router][dst]


def _routing_tables(cfg: SocConfig) -> RoutingTables:
    positions = [(r, c) for r in range(cfg.rows) for c in range(cfg.cols)]
    table = {src: {dst: xy_port(src, dst) for dst in positions} for src in positions}
    return RoutingTables(cfg.rows, cfg.cols, table)


def build_routing_tables(cfg: ValidatedSoC) -> RoutingTables:
    return _routing_tables(cfg.config if isinstance(cfg, ValidatedSoC) else cfg)
