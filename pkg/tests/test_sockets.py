import random

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from espsim.coherence import CohMsg
from espsim.config import MessageClass, parse_config
from espsim.engine import Simulator, TraceSink, simulate
from espsim.noc import Packet
from espsim.sockets import (AllocExhausted, BumpAllocator, DramChannel, LocalRequest,
                            PhysicalMemory, UnmappedAddress, master_proxy_translate)

from conftest import acc_tile, build, raw_config

MODES = ["fully_coherent", "coherent_dma", "llc_coherent_dma", "non_coherent_dma"]


def run(raw, level="timeline"):
    trace = TraceSink(level)
    sim = Simulator(parse_config(raw), trace=trace)
    stats = sim.run_until_quiescent(1_000_000)
    return sim, stats, trace


def events(trace, entity=None, event=None):
    return [r for r in trace.timeline
            if (entity is None or r[1] == entity) and (event is None or r[2] == event)]


# -- DRAM channel ----------------------------------------------------------------------


def test_single_burst_latency():
    ch = DramChannel(latency=30, bandwidth_words=1)
    assert ch.submit(100, "read", 0x8000_0000, 16, token="a") == 146
    assert all(ch.cycle(t) == [] for t in range(100, 146))
    assert ch.cycle(146) == [("a", [0] * 16)]


def test_back_to_back_bursts_queue_on_the_bus():
    ch = DramChannel(latency=30, bandwidth_words=1)
    assert ch.submit(100, "read", 0, 16, token="a") == 146
    assert ch.submit(100, "read", 128, 16, token="b") == 162
    done = {tok: t for t in range(100, 200) for tok, _ in ch.cycle(t)}
    assert done == {"a": 146, "b": 162}


def test_wider_bus_shortens_serialization():
    ch = DramChannel(latency=30, bandwidth_words=4)
    assert ch.submit(0, "read", 0, 16) == 34


def test_empty_channel_has_no_events():
    ch = DramChannel()
    assert ch.cycle(0) == [] and ch.idle


def test_write_lands_at_completion_and_order_is_fifo():
    mem = PhysicalMemory()
    ch = DramChannel(latency=5, bandwidth_words=1, memory=mem)
    ch.submit(0, "write", 64, 2, data=[7, 8], token="w")
    ch.submit(0, "read", 64, 2, token="r")
    assert mem.read(64, 2) == [0, 0]
    out = []
    for t in range(20):
        out += ch.cycle(t)
    assert out == [("w", None), ("r", [7, 8])]
    assert ch.words_written == 2 and ch.words_read == 2


# -- proxies ---------------------------------------------------------------------------


def two_mem_soc():
    return build(raw_config([["cpu", acc_tile(), "mem"], ["mem", "aux", "empty"]]))


def test_load_routed_to_owning_memory_tile():
    vsoc = two_mem_soc()
    pkt = master_proxy_translate(vsoc, (0, 0), LocalRequest("load", 0xA000_0040))
    assert pkt.dst == (1, 0)
    assert isinstance(pkt.body, CohMsg) and pkt.body.kind == "GetS"
    assert pkt.msg_class == MessageClass.COH_REQ
    low = master_proxy_translate(vsoc, (0, 0), LocalRequest("store", 0x8000_0040))
    assert low.dst == (0, 2) and low.body.kind == "GetM"


def test_register_write_is_single_flit_on_io_plane():
    vsoc = two_mem_soc()
    base, _ = vsoc.memory_map.aperture((0, 1))
    pkt = master_proxy_translate(vsoc, (0, 0), LocalRequest("reg_write", base + 0x10,
                                                            data=(5,)))
    assert pkt.dst == (0, 1) and pkt.msg_class == MessageClass.IO_IRQ
    assert vsoc.config.noc.flits_for_words(len(pkt.payload_words)) == 1
    assert pkt.body["offset"] == 0x10 and pkt.body["value"] == 5


def test_dma_request_uses_dma_plane():
    vsoc = two_mem_soc()
    pkt = master_proxy_translate(vsoc, (0, 1), LocalRequest("dma_read", 0xA000_0000,
                                                            words=8))
    assert pkt.msg_class == MessageClass.DMA_REQ and pkt.dst == (1, 0)


def test_unmapped_address_rejected():
    vsoc = two_mem_soc()
    with pytest.raises(UnmappedAddress):
        master_proxy_translate(vsoc, (0, 0), LocalRequest("load", 0x10))


def test_address_resolution_is_a_partition():
    vsoc = two_mem_soc()
    mm = vsoc.memory_map
    rng = random.Random(5)
    for _ in range(2000):
        addr = rng.randrange(mm.dram_base, mm.dram_base + mm.dram_size)
        assert sum(p.contains(addr) for p in mm.partitions) == 1
        ap_base = mm.register_apertures[0][1]
        reg = rng.randrange(ap_base, mm.dram_base)
        owners = [pos for pos, b, s in mm.register_apertures if b <= reg < b + s]
        assert len(owners) == 1 and mm.aperture_owner(reg)[0] == owners[0]


def test_unmapped_load_in_script_is_a_fault():
    raw = raw_config([["cpu", "mem", "aux"]],
                     workload={"scripts": {"cpu0": [{"op": "load", "addr": "0x10"}]}})
    _, stats, _ = run(raw)
    assert [f["code"] for f in stats.faults] == ["UnmappedAddress"]
    assert stats.quiescent


# -- local shortcut ----------------------------------------------------------------------


def test_flush_l2_generates_no_io_plane_traffic():
    ops = [{"op": "store", "addr": 0x8000_0000 + 64 * k, "value": k} for k in range(4)]
    ops.append({"op": "flush_l2"})
    raw = raw_config([["cpu", "mem", "aux"]], workload={"scripts": {"cpu0": ops}})
    sim, stats, _ = run(raw)
    assert stats.flits_injected.get(5, 0) == 0
    assert stats.llc["mem0"]["GetM"] == 4
    assert stats.packets_injected[1] == 8          # 4 GetM + 4 PutM
    assert sim.memories[0].llc.entry(0x8000_0000 // 64).data[0] == 0


def test_own_register_access_takes_shortcut():
    cpu_base_ops = [{"op": "write_reg", "tile": "cpu0", "offset": 8, "value": 11},
                    {"op": "read_reg", "tile": "cpu0", "offset": 8}]
    raw = raw_config([["cpu", "mem", "aux"]], workload={"scripts": {"cpu0": cpu_base_ops}})
    sim, stats, _ = run(raw)
    assert stats.flits_injected.get(5, 0) == 0
    assert stats.shortcuts == {"cpu0": 2}
    assert sim.processors[0].loads == [(8, 11)]


def test_remote_register_read_uses_the_noc():
    ops = [{"op": "read_reg", "tile": "acc0", "offset": 8}]
    raw = raw_config([["cpu", acc_tile(), "mem", "aux"]], workload={"scripts": {"cpu0": ops}})
    _, stats, _ = run(raw)
    assert stats.packets_injected[5] == 2 and not stats.shortcuts


def test_bad_register_offset_on_accelerator_reports_fault():
    ops = [{"op": "write_reg", "tile": "acc0", "offset": 0x40, "value": 1}]
    raw = raw_config([["cpu", acc_tile(), "mem", "aux"]], workload={"scripts": {"cpu0": ops}})
    _, stats, _ = run(raw)
    assert "BadRegisterOffset" in {f["code"] for f in stats.faults}
    assert stats.quiescent


# -- allocator ---------------------------------------------------------------------------


def test_bump_allocator_aligns_and_honours_hint():
    alloc = BumpAllocator(two_mem_soc())
    a = alloc.alloc(10)
    b = alloc.alloc(10)
    assert (a, b) == (0x8000_0000, 0x8000_0040)
    assert alloc.alloc(8, hint=1) == 0xA000_0000
    assert alloc.alloc(8, hint=3) == 0xA000_0040


def test_alloc_beyond_dram_is_exhausted():
    alloc = BumpAllocator(two_mem_soc())
    with pytest.raises(AllocExhausted):
        alloc.alloc(2 ** 31)


def test_alloc_exhausted_in_script_stops_that_script():
    ops = [{"op": "esp_alloc", "name": "big", "bytes": 2 ** 31},
           {"op": "load", "buffer": "big"}]
    raw = raw_config([["cpu", "mem", "aux"]], workload={"scripts": {"cpu0": ops}})
    sim, stats, _ = run(raw)
    assert [f["code"] for f in stats.faults] == ["AllocExhausted"]
    assert sim.processors[0].loads == []


# -- driver --------------------------------------------------------------------------------


def chain_raw(modes=("non_coherent_dma", "non_coherent_dma")):
    tiles = [["cpu", acc_tile(mode=modes[0]), "mem"], [acc_tile(mode=modes[1]), "aux", "empty"]]
    ops = [{"op": "esp_alloc", "name": "a", "bytes": 512, "init": "ramp"},
           {"op": "esp_alloc", "name": "b", "bytes": 512},
           {"op": "esp_alloc", "name": "c", "bytes": 512},
           {"op": "esp_run", "invocations": [
               {"name": "first", "accel": "acc0", "src": "a", "dst": "b"},
               {"name": "second", "accel": "acc1", "src": "b", "dst": "c",
                "after": ["first"]}]}]
    return raw_config(tiles, workload={"scripts": {"cpu0": ops}})


def test_dependent_invocation_starts_after_producer_irq():
    sim, stats, trace = run(chain_raw())
    irq0 = events(trace, "cpu0", "IRQ_RECV")[0]
    assert irq0[3] == "first"
    start1 = [r for r in events(trace, "cpu0", "START") if r[3] == "second"][0]
    cfg1 = events(trace, "acc1", "CFG")[0]
    assert start1[0] >= irq0[0] and cfg1[0] > irq0[0]
    assert stats.invocations["second"]["start"] >= stats.invocations["first"]["done"]
    words = sim.memory.read(sim.processors[0].buffers["c"].base, 64)
    assert words == list(range(1, 65))


def test_single_completion_gives_single_irq():
    _, stats, trace = run(chain_raw())
    assert len(events(trace, "acc0", "IRQ")) == 1
    assert len(events(trace, "cpu0", "IRQ_RECV")) == 2
    assert not stats.warnings


def test_llc_coherent_dma_never_touches_private_caches():
    raw = chain_raw(("llc_coherent_dma", "llc_coherent_dma"))
    _, stats, _ = run(raw)
    assert stats.llc["mem0"]["dma_read"] > 0
    assert stats.flits_injected.get(2, 0) == 0


def test_coherent_dma_reads_cpu_dirty_data():
    tiles = [["cpu", acc_tile(mode="coherent_dma"), "mem"], ["empty", "aux", "empty"]]
    ops = [{"op": "esp_alloc", "name": "a", "bytes": 512},
           {"op": "esp_alloc", "name": "b", "bytes": 512},
           {"op": "store", "buffer": "a", "offset": 0, "value": 77},
           {"op": "esp_run", "invocations": [{"name": "x", "accel": "acc0", "src": "a",
                                              "dst": "b"}]},
           {"op": "load", "buffer": "b", "offset": 0}]
    sim, stats, _ = run(raw_config(tiles, workload={"scripts": {"cpu0": ops}}))
    assert sim.processors[0].loads[-1][1] == 77
    assert stats.flits_injected.get(2, 0) > 0      # the CPU copy was forwarded


# -- aux tile ----------------------------------------------------------------------------------


def _aux_sim():
    raw = raw_config([["cpu", acc_tile(), acc_tile()], ["mem", "aux", "empty"]])
    return Simulator(parse_config(raw))


def test_same_cycle_irqs_forwarded_in_tile_order(monkeypatch):
    sim = _aux_sim()
    aux = sim.by_name["aux"]
    sent = []
    monkeypatch.setattr(aux, "send", sent.append)
    for src in [(0, 2), (0, 1)]:
        aux.deliver(Packet(src, aux.pos, MessageClass.IO_IRQ, [],
                           {"kind": "acc_done", "invoker": (0, 0), "raised": 0}))
    aux.proxy_step(0)
    assert [p.body["acc"] for p in sent] == [(0, 1), (0, 2)]
    assert all(p.dst == (0, 0) and p.body["kind"] == "irq" for p in sent)


def test_irq_without_owner_or_waiter_is_spurious():
    sim = _aux_sim()
    aux = sim.by_name["aux"]
    aux.deliver(Packet((0, 1), aux.pos, MessageClass.IO_IRQ, [], {"kind": "acc_done"}))
    aux.proxy_step(0)
    cpu = sim.processors[0]
    cpu.deliver(Packet(aux.pos, cpu.pos, MessageClass.IO_IRQ, [],
                       {"kind": "irq", "acc": (0, 2), "raised": 0}))
    assert [w["code"] for w in sim.warnings] == ["SpuriousIrq", "SpuriousIrq"]
    assert cpu.irq_pending == {} and aux.pending == []


# -- end-to-end data integrity -------------------------------------------------------------------

ACC_POS = [(0, 3), (1, 0), (1, 1), (1, 2)]
WORDS = 32


def dag_workload(modes, sources, two_mem, seed, dirty):
    tiles = [["cpu", "mem", "aux", "empty"], ["empty"] * 3 + ["mem" if two_mem else "empty"]]
    for i, mode in enumerate(modes):
        r, c = ACC_POS[i]
        tiles[r][c] = acc_tile(mode=mode, name=f"a{i}")
    ops = [{"op": "esp_alloc", "name": "b0", "bytes": WORDS * 8, "init": "random"}]
    ops += [{"op": "store", "buffer": "b0", "offset": 8 * k, "value": 1000 + k}
            for k in dirty]
    invs = []
    for i, s in enumerate(sources):
        ops.append({"op": "esp_alloc", "name": f"b{i + 1}", "bytes": WORDS * 8,
                    "memory_tile": i % 2})
        after = [f"i{s - 1}"] if s > 0 else []
        invs.append({"name": f"i{i}", "accel": f"a{i}", "src": f"b{s}", "dst": f"b{i + 1}",
                     "after": after})
    ops.append({"op": "esp_run", "invocations": invs})
    for b in range(len(modes) + 1):
        ops += [{"op": "load", "buffer": f"b{b}", "offset": 8 * k} for k in range(WORDS)]
    accels = {"acc": {"burst_len_words": 8, "num_bursts": WORDS // 8,
                      "compute_cycles_per_burst": 3, "plm_words": 16}}
    return raw_config(tiles, accelerators=accels, workload={"scripts": {"cpu0": ops}},
                      seed=seed)


@st.composite
def dags(draw):
    n = draw(st.integers(1, 4))
    modes = [draw(st.sampled_from(MODES)) for _ in range(n)]
    sources = [draw(st.integers(0, i)) for i in range(n)]
    dirty = draw(st.sets(st.integers(0, WORDS - 1), max_size=6))
    return modes, sources, draw(st.booleans()), draw(st.integers(0, 2 ** 32)), sorted(dirty)


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(dags())
def test_random_dag_matches_atomic_memory_oracle(dag):
    modes, sources, two_mem, seed, dirty = dag
    raw = dag_workload(modes, sources, two_mem, seed, dirty)
    sim, stats = simulate(parse_config(raw))
    assert stats.quiescent and not stats.faults and not stats.warnings
    # oracle: a flat memory where each copy-through invocation runs atomically
    rng = random.Random(f"{seed}:b0")
    flat = {"b0": [rng.getrandbits(32) for _ in range(WORDS)]}
    for k in dirty:
        flat["b0"][k] = 1000 + k
    for i, s in enumerate(sources):
        flat[f"b{i + 1}"] = list(flat[f"b{s}"])
    loaded = [v for _, v in sim.processors[0].loads]
    for b in range(len(modes) + 1):
        assert loaded[b * WORDS:(b + 1) * WORDS] == flat[f"b{b}"], f"buffer b{b}"
