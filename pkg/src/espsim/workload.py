"""Workload section: per-processor driver scripts and accelerator invocations.

Scripts are keyed by processor tile name.  Each op is an object with an
``op`` field::

    {"op": "esp_alloc", "name": "in", "bytes": 8192, "memory_tile": 0, "init": "ramp"}
    {"op": "store", "buffer": "in", "offset": 8, "value": 5}
    {"op": "load", "addr": "0x80000000"}
    {"op": "write_reg", "tile": "acc0", "offset": 16, "value": 1}
    {"op": "read_reg", "tile": "acc0", "offset": 8}
    {"op": "flush_l2"}
    {"op": "esp_run", "invocations": [...], "flush": true}
    {"op": "wait_irq", "tile": "acc0"}
    {"op": "barrier"}
    {"op": "esp_free", "name": "in"}

An invocation is ``{"name", "accel", "src", "dst", "mode", "after", "p2p_src"}``.
``p2p_src`` names another invocation of the same ``esp_run`` whose stores
feed this one directly; ``src`` is then omitted.  Both ends are started
together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from .config import (CoherenceMode, ConfigError, Position, TileKind, ValidatedSoC, Violation,
                     parse_int)

OPS = {"load", "store", "flush_l2", "write_reg", "read_reg", "esp_alloc", "esp_free",
       "esp_run", "wait_irq", "barrier"}
INIT_KINDS = ("zero", "ramp", "random")


@dataclass(frozen=True)
class Invocation:
    name: str
    accel: Position
    accel_name: str
    src: Optional[str] = None
    dst: Optional[str] = None
    mode: Optional[CoherenceMode] = None
    after: Tuple[str, ...] = ()
    p2p_src: Optional[str] = None
    p2p_dst: Optional[str] = None      # derived from the consumer's p2p_src


@dataclass(frozen=True)
class Op:
    kind: str
    args: Dict[str, Any] = field(default_factory=dict)
    invocations: Tuple[Invocation, ...] = ()

    def __getitem__(self, key):
        return self.args[key]

    def get(self, key, default=None):
        return self.args.get(key, default)


@dataclass(frozen=True)
class Workload:
    scripts: Tuple[Tuple[Position, Tuple[Op, ...]], ...] = ()

    def script_for(self, pos: Position) -> Tuple[Op, ...]:
        for p, ops in self.scripts:
            if p == pos:
                return ops
        return ()

    @property
    def empty(self) -> bool:
        return not any(ops for _, ops in self.scripts)


def _tile_pos(vsoc: ValidatedSoC, name, kinds, where: str, out: List[Violation]):
    try:
        t = vsoc.config.tile_named(str(name))
    except KeyError:
        out.append(Violation("UnknownTile", f"{where}: no tile named {name!r}"))
        return None
    if kinds and t.kind not in kinds:
        out.append(Violation("UnknownTile", f"{where}: {name!r} is a {t.kind.value} tile"))
        return None
    return t.position


def _int_arg(raw: dict, key: str, where: str, out: List[Violation], required=True):
    if key not in raw:
        if required:
            out.append(Violation("BadValue", f"{where}: missing {key!r}"))
        return None
    try:
        return parse_int(raw[key])
    except ValueError:
        out.append(Violation("BadValue", f"{where}: {key!r} is not an integer"))
        return None


def _invocations(vsoc, raw_list, buffers, where, out) -> Tuple[Invocation, ...]:
    if not isinstance(raw_list, list) or not raw_list:
        out.append(Violation("BadValue", f"{where}: invocations must be a non-empty list"))
        return ()
    parsed: Dict[str, dict] = {}
    for i, raw in enumerate(raw_list):
        w = f"{where}.invocations[{i}]"
        if not isinstance(raw, dict) or "name" not in raw or "accel" not in raw:
            out.append(Violation("BadValue", f"{w}: needs name and accel"))
            continue
        unknown = set(raw) - {"name", "accel", "src", "dst", "mode", "after", "p2p_src"}
        if unknown:
            out.append(Violation("UnknownKey", f"{w}: {sorted(unknown)}"))
        name = str(raw["name"])
        if name in parsed:
            out.append(Violation("BadValue", f"{w}: duplicate invocation {name!r}"))
        parsed[name] = raw
    consumers = {}
    for name, raw in parsed.items():
        if raw.get("p2p_src") is not None:
            prod = str(raw["p2p_src"])
            if prod not in parsed:
                out.append(Violation("UnknownDependency", f"{where}: {name} p2p_src {prod!r}"))
            elif prod in consumers:
                out.append(Violation("BadValue", f"{where}: {prod} feeds two consumers"))
            consumers[prod] = name
    result = []
    for name, raw in parsed.items():
        w = f"{where}.{name}"
        acc = _tile_pos(vsoc, raw["accel"], (TileKind.ACCELERATOR,), w, out)
        mode = None
        if raw.get("mode") is not None:
            try:
                mode = CoherenceMode(raw["mode"])
            except ValueError:
                out.append(Violation("BadValue", f"{w}: unknown mode {raw['mode']!r}"))
        p2p_src = raw.get("p2p_src")
        p2p_dst = consumers.get(name)
        src, dst = raw.get("src"), raw.get("dst")
        if (src is None) == (p2p_src is None):
            out.append(Violation("BadValue", f"{w}: give exactly one of src and p2p_src"))
        if (dst is None) == (p2p_dst is None):
            out.append(Violation("BadValue", f"{w}: needs dst unless another invocation "
                                             f"consumes it through p2p_src"))
        for b in (src, dst):
            if b is not None and b not in buffers:
                out.append(Violation("UnknownBuffer", f"{w}: buffer {b!r} is not allocated"))
        after = tuple(str(a) for a in raw.get("after", ()))
        for a in after:
            if a not in parsed:
                out.append(Violation("UnknownDependency", f"{w}: after {a!r}"))
        if acc is None:
            continue
        result.append(Invocation(name, acc, str(raw["accel"]), src, dst, mode, after,
                                 None if p2p_src is None else str(p2p_src), p2p_dst))
    # dependency graph (after edges plus producer -> consumer) must be acyclic
    edges = {inv.name: set(inv.after) for inv in result}
    for inv in result:
        if inv.p2p_src:
            edges[inv.name].add(inv.p2p_src)
    state: Dict[str, int] = {}

    def visit(n) -> bool:
        if state.get(n) == 1:
            return False
        if state.get(n) == 2:
            return True
        state[n] = 1
        ok = all(visit(m) for m in edges.get(n, ()) if m in edges)
        state[n] = 2
        return ok

    if not all(visit(n) for n in sorted(edges)):
        out.append(Violation("CyclicGraph", f"{where}: invocation graph has a cycle"))
    return tuple(result)


def _op(vsoc, raw, buffers: set, where: str, out: List[Violation]) -> Optional[Op]:
    if not isinstance(raw, dict) or raw.get("op") not in OPS:
        out.append(Violation("UnknownOp", f"{where}: {raw!r}"))
        return None
    kind = raw["op"]
    args: Dict[str, Any] = {}
    if kind in ("load", "store"):
        if "buffer" in raw:
            if raw["buffer"] not in buffers:
                out.append(Violation("UnknownBuffer", f"{where}: {raw['buffer']!r}"))
            args["buffer"] = raw["buffer"]
            args["offset"] = _int_arg(raw, "offset", where, out, required=False) or 0
        else:
            args["addr"] = _int_arg(raw, "addr", where, out)
        if kind == "store":
            args["value"] = _int_arg(raw, "value", where, out)
    elif kind in ("write_reg", "read_reg"):
        args["tile"] = _tile_pos(vsoc, raw.get("tile"), (), where, out)
        args["offset"] = _int_arg(raw, "offset", where, out)
        if kind == "write_reg":
            args["value"] = _int_arg(raw, "value", where, out)
    elif kind == "esp_alloc":
        name = raw.get("name")
        if not isinstance(name, str):
            out.append(Violation("BadValue", f"{where}: esp_alloc needs a name"))
            return None
        if name in buffers:
            out.append(Violation("BadValue", f"{where}: buffer {name!r} allocated twice"))
        buffers.add(name)
        args["name"] = name
        args["bytes"] = _int_arg(raw, "bytes", where, out)
        args["memory_tile"] = _int_arg(raw, "memory_tile", where, out, required=False)
        init = raw.get("init", "zero")
        if not (init in INIT_KINDS or isinstance(init, list)):
            out.append(Violation("BadValue", f"{where}: init must be zero, ramp, random or a list"))
        args["init"] = init
    elif kind == "esp_free":
        if raw.get("name") not in buffers:
            out.append(Violation("UnknownBuffer", f"{where}: {raw.get('name')!r}"))
        args["name"] = raw.get("name")
    elif kind == "esp_run":
        invs = _invocations(vsoc, raw.get("invocations"), buffers, where, out)
        return Op(kind, {"flush": bool(raw.get("flush", True))}, invs)
    elif kind == "wait_irq":
        args["tile"] = _tile_pos(vsoc, raw.get("tile"), (TileKind.ACCELERATOR,), where, out)
    return Op(kind, args)


def parse_workload(vsoc: ValidatedSoC, raw: Any) -> Workload:
    """Check and resolve the workload section against the validated SoC."""
    if raw is None:
        return Workload()
    out: List[Violation] = []
    if not isinstance(raw, dict):
        raise ConfigError([Violation("BadValue", "workload must be an object")])
    unknown = set(raw) - {"scripts"}
    if unknown:
        out.append(Violation("UnknownKey", f"workload: {sorted(unknown)}"))
    scripts_raw = raw.get("scripts") or {}
    if not isinstance(scripts_raw, dict):
        raise ConfigError([Violation("BadValue", "workload.scripts must map processor names "
                                                 "to op lists")])
    scripts: Dict[Position, Tuple[Op, ...]] = {}
    for name, ops in scripts_raw.items():
        pos = _tile_pos(vsoc, name, (TileKind.PROCESSOR,), f"workload.scripts.{name}", out)
        if not isinstance(ops, list):
            out.append(Violation("BadValue", f"workload.scripts.{name} must be a list"))
            continue
        buffers: set = set()
        parsed = [_op(vsoc, op, buffers, f"workload.scripts.{name}[{i}]", out)
                  for i, op in enumerate(ops)]
        if pos is not None:
            scripts[pos] = tuple(p for p in parsed if p is not None)
    if out:
        raise ConfigError(out)
    return Workload(tuple(sorted(scripts.items())))
