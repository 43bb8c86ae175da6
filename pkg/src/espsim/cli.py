"""Command-line front end: ``espsim validate|run|sweep``.

Exit codes: 0 ok, 1 invalid configuration, 2 unreadable or unparsable input,
3 suspected deadlock.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .config import ConfigError, ConfigParseError, parse_config, validate_config
from .engine import TRACE_LEVELS, DeadlockSuspected, Simulator, TraceSink

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_DEADLOCK = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- input ------------------------------------------------------------------


def bundled_scenarios() -> List[str]:
    root = resources.files("espsim") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def read_raw(ref: str) -> Any:
    """Load a config file, falling back to a bundled scenario of that name."""
    path = Path(ref)
    if not path.exists() and ref in bundled_scenarios():
        text = (resources.files("espsim") / "scenarios" / f"{ref}.json").read_text()
        return json.loads(text)
    try:
        return json.loads(path.read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigParseError(f"{ref}: {exc}") from exc


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- sweep axes -------------------------------------------------------------


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_axis(spec: str) -> Tuple[str, List[Any]]:
    key, sep, values = spec.partition("=")
    if not sep or not key.strip():
        raise UsageError(f"axis {spec!r} must look like dotted.key=v1,v2")
    items = [v for v in values.split(",") if v.strip()]
    if not items:
        raise UsageError(f"axis {key!r} has no values")
    return key.strip(), [_parse_value(v.strip()) for v in items]


def set_dotted(raw: Any, key: str, value: Any) -> None:
    """Replace an existing entry addressed by ``a.b.0.c``; list parts are indices."""
    parts = key.split(".")
    node = raw
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            try:
                idx = int(part)
                node[idx]
            except (ValueError, IndexError):
                raise ConfigError([]) from None
            if last:
                node[idx] = value
            else:
                node = node[idx]
        elif isinstance(node, dict) and part in node:
            if last:
                node[part] = value
            else:
                node = node[part]
        else:
            raise ConfigError([])


def _check_axis_keys(raw: Any, axes: Sequence[Tuple[str, List[Any]]]) -> Optional[str]:
    for key, values in axes:
        try:
            set_dotted(copy.deepcopy(raw), key, values[0])
        except ConfigError:
            return key
    return None


# -- execution --------------------------------------------------------------


def run_point(raw: Any, out: Path, level: str, seed: Optional[int],
              max_cycles: int) -> Dict[str, Any]:
    """Simulate one configuration and write its artifacts under ``out``."""
    try:
        vsoc = validate_config(parse_config(raw))
    except ConfigError as exc:
        return {"status": "invalid", "code": EXIT_INVALID,
                "errors": [str(v) for v in exc.violations]}
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "trace.log"
    log = open(log_path, "w") if level == "full" else None
    trace = TraceSink(level, stream=log)
    try:
        sim = Simulator(vsoc, trace=trace, seed=seed)
        try:
            stats = sim.run_until_quiescent(max_cycles)
        except DeadlockSuspected as exc:
            _atomic_write(out / "deadlock.json",
                          json.dumps({"cycle": exc.cycle, "window": exc.window,
                                      "state": exc.dump}, indent=2, sort_keys=True) + "\n")
            return {"status": "deadlock", "code": EXIT_DEADLOCK, "cycle": exc.cycle}
    finally:
        if log is not None:
            log.close()
    _atomic_write(out / "stats.json", stats.to_json())
    if trace.keeps_timeline:
        _atomic_write(out / "timeline.csv", trace.timeline_csv())
    return {"status": "ok" if stats.quiescent else "max_cycles", "code": EXIT_OK,
            "makespan": stats.makespan, "cycles": stats.cycles}


def _sweep_worker(args) -> Dict[str, Any]:
    raw, out, level, seed, max_cycles = args
    return run_point(raw, Path(out), level, seed, max_cycles)


# -- commands ---------------------------------------------------------------


def cmd_validate(ns) -> int:
    raw = read_raw(ns.config)
    try:
        vsoc = validate_config(parse_config(raw))
    except ConfigError as exc:
        for v in exc.violations:
            print(f"error: {v}", file=sys.stderr)
        return EXIT_INVALID
    cfg = vsoc.config
    print(f"ok: {cfg.rows}x{cfg.cols} grid, {len(cfg.tiles)} tiles")
    return EXIT_OK


def cmd_run(ns) -> int:
    raw = read_raw(ns.config)
    res = run_point(raw, Path(ns.out), ns.trace, ns.seed, ns.max_cycles)
    for err in res.get("errors", ()):
        print(f"error: {err}", file=sys.stderr)
    if res["status"] == "deadlock":
        print(f"deadlock suspected at cycle {res['cycle']}; state in {ns.out}/deadlock.json",
              file=sys.stderr)
    elif res["status"] == "max_cycles":
        print(f"stopped at --max-cycles before quiescence ({res['cycles']} cycles)",
              file=sys.stderr)
    elif res["status"] == "ok":
        print(f"makespan {res['makespan']} cycles; results in {ns.out}")
    return res["code"]


def cmd_sweep(ns) -> int:
    if not ns.axis:
        raise UsageError("sweep needs at least one --axis")
    axes = [parse_axis(a) for a in ns.axis]
    raw = read_raw(ns.config)
    bad = _check_axis_keys(raw, axes)
    if bad is not None:
        print(f"error: axis key {bad!r} does not name an existing config entry",
              file=sys.stderr)
        return EXIT_INVALID
    out = Path(ns.out)
    jobs, points = [], []
    for i, combo in enumerate(itertools.product(*(vals for _, vals in axes))):
        point_raw = copy.deepcopy(raw)
        params = {}
        for (key, _), value in zip(axes, combo):
            set_dotted(point_raw, key, value)
            params[key] = value
        pdir = out / f"point_{i:03d}"
        points.append((params, pdir))
        jobs.append((point_raw, str(pdir), ns.trace, ns.seed, ns.max_cycles))
    if ns.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=ns.jobs) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(j) for j in jobs]
    index = {"axes": {k: v for k, v in axes}, "points": []}
    code = EXIT_OK
    for i, ((params, pdir), res) in enumerate(zip(points, results)):
        entry = {"index": i, "params": params, "dir": pdir.name, **res}
        if res["code"] == EXIT_OK:
            entry["stats"] = f"{pdir.name}/stats.json"
        else:
            print(f"point {i} {params}: {res['status']}", file=sys.stderr)
        index["points"].append(entry)
        code = max(code, res["code"])
    _atomic_write(out / "index.json", json.dumps(index, indent=2, sort_keys=True) + "\n")
    print(f"{len(points)} points; index in {out / 'index.json'}")
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="espsim", description="Cycle-level tiled SoC simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a configuration")
    v.add_argument("config", help="config file or bundled scenario name")
    v.set_defaults(func=cmd_validate)

    def common(sp, default_out):
        sp.add_argument("config", help="config file or bundled scenario name")
        sp.add_argument("--out", default=default_out, help="output directory")
        sp.add_argument("--trace", default="timeline", choices=TRACE_LEVELS)
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--max-cycles", type=int, default=10_000_000)

    r = sub.add_parser("run", help="simulate until quiescent")
    common(r, "espsim_out")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run the Cartesian product of parameter axes")
    common(s, "espsim_sweep")
    s.add_argument("--axis", action="append", default=[],
                   help="dotted.key=v1,v2,... (repeatable)")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    sub.add_parser("scenarios", help="list bundled scenarios").set_defaults(
        func=lambda ns: print("\n".join(bundled_scenarios())) or EXIT_OK)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if getattr(ns, "max_cycles", 1) <= 0:
        parser.error("--max-cycles must be positive")
    try:
        return ns.func(ns)
    except UsageError as exc:
        parser.error(str(exc))
    except ConfigParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
