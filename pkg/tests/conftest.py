import copy
import json
from importlib import resources

import pytest

from espsim.config import parse_config, validate_config


def acc_tile(model="acc", mode="non_coherent_dma", name=None):
    t = {"kind": "acc", "model": model, "mode": mode}
    if name:
        t["name"] = name
    return t


def raw_config(tiles, accelerators=None, workload=None, **sections):
    """Build a raw config dict from a row-major tile grid."""
    raw = {"grid": {"rows": len(tiles), "cols": len(tiles[0])}, "tiles": tiles}
    if accelerators is None and any(isinstance(t, dict) and t.get("kind") == "acc"
                                    for row in tiles for t in row):
        accelerators = {"acc": {"burst_len_words": 16, "num_bursts": 4,
                                "compute_cycles_per_burst": 10, "plm_words": 32}}
    if accelerators:
        raw["accelerators"] = accelerators
    if workload is not None:
        raw["workload"] = workload
    raw.update(sections)
    return raw


def build(raw):
    return validate_config(parse_config(copy.deepcopy(raw)))


def scenario_raw(name):
    return json.loads((resources.files("espsim") / "scenarios" / f"{name}.json").read_text())


FIG2_TILES = [["cpu", acc_tile(), "mem"], [acc_tile(), "aux", "empty"],
              ["empty", "empty", "empty"]]


@pytest.fixture
def fig2_raw():
    return raw_config(copy.deepcopy(FIG2_TILES))
