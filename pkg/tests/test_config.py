import itertools

import pytest

from espsim.config import (CoherenceMode, ConfigError, GIB, IndivisibleDramSize, MessageClass,
                           MIB, Port, TileKind, build_memory_map, build_routing_tables, hops,
                           load_config, parse_config, plane_for_message, step,
                           validate_config)

from conftest import acc_tile, build, raw_config


def codes(raw):
    with pytest.raises(ConfigError) as info:
        build(raw)
    return info.value.codes


def test_fig2_topology_is_valid(fig2_raw):
    vsoc = build(fig2_raw)
    kinds = [t.kind for t in vsoc.config.tiles]
    assert kinds.count(TileKind.ACCELERATOR) == 2
    assert kinds.count(TileKind.AUXILIARY) == 1


def test_aux_only_grid_lacks_processor():
    assert "NoProcessorTile" in codes(raw_config([["aux"]]))


def test_five_memory_tiles_rejected():
    tiles = [["cpu", "mem", "mem"], ["mem", "aux", "mem"], ["mem", "empty", "empty"]]
    assert "MemoryTileCountOutOfRange" in codes(raw_config(tiles))


def test_all_violations_reported_together():
    raw = raw_config([["mem", "aux"], ["aux", acc_tile(model="nope")]])
    raw["grid"]["cols"] = 3
    found = set(codes(raw))
    assert {"GridMismatch", "MultipleAuxTiles", "NoProcessorTile",
            "UnknownAcceleratorRef"} <= found


def test_two_aux_message_names_both_positions():
    with pytest.raises(ConfigError) as info:
        build(raw_config([["cpu", "aux"], ["mem", "aux"]]))
    text = str(info.value)
    assert "(0, 1)" in text and "(1, 1)" in text


def test_missing_aux():
    assert "NoAuxTile" in codes(raw_config([["cpu", "mem"]]))


def test_mode_only_on_accelerators():
    assert "ModeOnNonAccelerator" in codes(
        raw_config([["cpu", {"kind": "mem", "mode": "non_coherent_dma"}, "aux"]]))
    assert "MissingCoherenceMode" in codes(
        raw_config([["cpu", {"kind": "acc", "model": "acc"}, "mem", "aux"]]))


def test_unknown_keys_rejected():
    raw = raw_config([["cpu", "mem", "aux"]])
    raw["colour"] = 1
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_too_few_planes():
    assert "TooFewPlanes" in codes(raw_config([["cpu", "mem", "aux"]], noc={"planes": 5}))


def test_validate_is_idempotent(fig2_raw):
    once = build(fig2_raw)
    twice = validate_config(once)
    assert twice.memory_map == once.memory_map
    assert twice.routing == once.routing
    assert twice.config == once.config


def test_load_config_parse_errors(tmp_path):
    from espsim.config import ConfigParseError
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigParseError):
        load_config(bad)
    with pytest.raises(ConfigParseError):
        load_config(tmp_path / "missing.json")


# -- memory map ---------------------------------------------------------------


def _mem_grid(n_mem):
    cells = ["cpu", "aux"] + ["mem"] * n_mem
    cells += ["empty"] * (6 - len(cells))
    return raw_config([cells[:3], cells[3:]])


def test_two_partitions_split_at_half():
    mm = build(_mem_grid(2)).memory_map
    assert [(p.base, p.size) for p in mm.partitions] == [(0x8000_0000, 512 * MIB),
                                                        (0xA000_0000, 512 * MIB)]


def test_single_partition_is_whole_range():
    mm = build(_mem_grid(1)).memory_map
    assert [(p.base, p.size) for p in mm.partitions] == [(0x8000_0000, GIB)]


@pytest.mark.parametrize("n_mem", [1, 2, 3, 4])
def test_partitions_cover_dram_by_brute_force(n_mem):
    raw = _mem_grid(n_mem)
    if n_mem == 3:
        raw["dram"] = {"size": 3 * 256 * MIB}
    vsoc = build(raw)
    mm = vsoc.memory_map
    page = 4096
    owners = {}
    for addr in range(mm.dram_base, mm.dram_base + mm.dram_size, page):
        hits = [p.tile for p in mm.partitions if p.contains(addr)]
        assert len(hits) == 1
        owners[hits[0]] = owners.get(hits[0], 0) + 1
    assert not any(p.contains(mm.dram_base - 1) or p.contains(mm.dram_base + mm.dram_size)
                   for p in mm.partitions)
    mem_order = [t.position for t in vsoc.config.tiles if t.kind == TileKind.MEMORY]
    assert [p.tile for p in mm.partitions] == mem_order
    assert set(owners.values()) == {mm.dram_size // n_mem // page}


def test_indivisible_dram_size():
    raw = _mem_grid(3)
    with pytest.raises(IndivisibleDramSize):
        build(raw)


def test_apertures_disjoint_and_below_dram(fig2_raw):
    vsoc = build(fig2_raw)
    mm = build_memory_map(vsoc)
    spans = sorted((b, b + s) for _, b, s in mm.register_apertures)
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    assert spans[-1][1] <= mm.dram_base
    non_empty = [t.position for t in vsoc.config.tiles if t.kind != TileKind.EMPTY]
    assert [p for p, _, _ in mm.register_apertures] == non_empty


# -- routing --------------------------------------------------------------------


def _xy_oracle(src, dst):
    """Walk the full XY path and return the first hop direction."""
    (r, c), (dr, dc) = src, dst
    if c != dc:
        return Port.E if dc > c else Port.W
    if r != dr:
        return Port.S if dr > r else Port.N
    return Port.LOCAL


def test_routing_examples(fig2_raw):
    rt = build(fig2_raw).routing
    assert rt.port((0, 0), (0, 2)) == Port.E
    assert rt.port((0, 0), (2, 1)) == Port.E
    assert rt.port((1, 1), (1, 1)) == Port.LOCAL


@pytest.mark.parametrize("rows,cols", [(3, 3), (4, 4), (2, 5)])
def test_routing_matches_xy_oracle_and_reaches_destination(rows, cols):
    tiles = [["empty"] * cols for _ in range(rows)]
    tiles[0][0], tiles[0][1], tiles[rows - 1][cols - 1] = "cpu", "mem", "aux"
    vsoc = build(raw_config(tiles))
    rt = build_routing_tables(vsoc)
    cells = vsoc.positions
    for src, dst in itertools.product(cells, cells):
        assert rt.port(src, dst) == _xy_oracle(src, dst)
        pos, n = src, 0
        while pos != dst:
            pos = step(pos, rt.port(pos, dst))
            n += 1
        assert n == hops(src, dst)


@pytest.mark.parametrize("rows,cols", [(3, 3), (4, 4)])
def test_channel_dependency_graph_is_acyclic(rows, cols):
    import networkx as nx
    tiles = [["empty"] * cols for _ in range(rows)]
    tiles[0][0], tiles[0][1], tiles[1][1] = "cpu", "mem", "aux"
    vsoc = build(raw_config(tiles))
    rt = vsoc.routing
    g = nx.DiGraph()
    for src, dst in itertools.product(vsoc.positions, vsoc.positions):
        pos, prev = src, None
        while pos != dst:
            port = rt.port(pos, dst)
            nxt = step(pos, port)
            chan = (pos, nxt)
            if prev is not None:
                g.add_edge(prev, chan)
            prev, pos = chan, nxt
    assert g.number_of_edges() > 0
    assert nx.is_directed_acyclic_graph(g)


# -- planes ---------------------------------------------------------------------


def test_plane_assignment():
    expected = {"coh_req": 1, "coh_fwd": 2, "coh_rsp": 3, "dma_req": 4, "io_irq": 5,
                "dma_rsp": 6}
    assert {m.value: plane_for_message(m) for m in MessageClass} == expected
    assert len(set(expected.values())) == len(MessageClass)


def test_plane_map_override_used_by_deadlock_hook():
    raw = raw_config([["cpu", "mem", "aux"]],
                     noc={"plane_map": {"coh_fwd": 1, "coh_rsp": 1}})
    table = build(raw).config.noc.plane_table
    assert table[MessageClass.COH_FWD] == table[MessageClass.COH_RSP] == 1
    assert table[MessageClass.DMA_RSP] == 6


def test_mode_codes_round_trip():
    for m in CoherenceMode:
        assert CoherenceMode.from_code(m.code) is m
