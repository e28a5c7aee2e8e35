import numpy as np
import pytest

from helpers import FlatOracle, build_chain, full_read, random_trace
from sqdisk.chainstore import create_base, open_chain, snapshot_scalable, snapshot_vanilla, stream
from sqdisk.engine_base import CorruptionError, EngineError
from sqdisk.engine_scalable import ScalableEngine, cache_correct
from sqdisk.engine_vanilla import VanillaEngine
from sqdisk.imgfmt import OFFSET_BITS, FormatError, ImageHeader
from sqdisk.metrics import LatencyModelParams

MiB = 1 << 20
CS = 65536


def journey_chain(tmp_path, scalable=False):
    """Base owns cluster 0; layers 1 and 2 own clusters 1 and 2 (so their tables exist)."""
    create_base(str(tmp_path / "l0.sqd"), 4 * MiB, scalable=scalable)
    chain = open_chain(str(tmp_path / "l0.sqd"), writable=True)
    Engine = ScalableEngine if scalable else VanillaEngine
    snap = snapshot_scalable if scalable else snapshot_vanilla
    for k in range(3):
        if k:
            snap(chain, str(tmp_path / ("l%d.sqd" % k)))
        eng = Engine(chain)
        eng.write(k * CS, bytes([k + 1]) * CS)
        eng.close()
    return chain


def test_length_one_hit(tmp_path):
    create_base(str(tmp_path / "b.sqd"), 4 * MiB)
    with open_chain(str(tmp_path / "b.sqd"), writable=True) as chain:
        VanillaEngine(chain).write(0, b"x" * 10)
        eng = VanillaEngine(chain)
        layer, host = eng.lookup(5)
        assert layer == 0 and host % CS == 0
        c = eng.counters
        assert c.consultations == 1 and c.cache_hit_unallocated == 0


def test_journey_counters(tmp_path):
    with journey_chain(tmp_path) as chain:
        eng = VanillaEngine(chain)
        assert eng.lookup(100)[0] == 0
        c = eng.counters
        assert c.cache_hit_unallocated == 2
        assert c.cache_hit == 1
        assert c.consultations == 3
        assert c.per_layer_lookups == [1, 1, 1]
        assert c.cache_miss == 3


def test_unallocated_everywhere(tmp_path):
    with journey_chain(tmp_path) as chain:
        eng = VanillaEngine(chain)
        assert eng.lookup(40 * CS) is None
        assert eng.counters.consultations == 3
        assert eng.counters.cache_hit == 0


def test_absent_tables_counted_separately(tmp_path):
    create_base(str(tmp_path / "b.sqd"), 4 * MiB)
    with open_chain(str(tmp_path / "b.sqd"), writable=True) as chain:
        VanillaEngine(chain).write(0, b"x")
        snapshot_vanilla(chain)
        snapshot_vanilla(chain)
        eng = VanillaEngine(chain)
        assert eng.lookup(0)[0] == 0
        c = eng.counters
        assert (c.absent_table, c.cache_hit, c.cache_miss, c.slice_fetches) == (2, 1, 1, 1)


def test_scalable_journey_direct(tmp_path):
    with journey_chain(tmp_path, scalable=True) as chain:
        eng = ScalableEngine(chain)
        assert eng.lookup(100)[0] == 0
        c = eng.counters
        assert c.consultations == 1
        assert c.cache_hit_unallocated == 1
        assert c.per_layer_lookups == [0, 0, 1]
        assert c.slice_fetches == 2
        assert eng.lookup(2 * CS)[0] == 2
        assert eng.counters.slice_fetches == 2


def test_scalable_length_100_direct_access(tmp_path):
    spec, active = build_chain(tmp_path, size=4 * MiB, length=100, fill_pct=100, seed=1, mode="scalable")
    owners = spec.layout()
    cluster = int(np.nonzero(owners == 3)[0][0])
    with open_chain(active) as chain:
        reads_before = [l.slice_reads for l in chain.layers]
        eng = ScalableEngine(chain)
        assert eng.lookup(cluster * CS)[0] == 3
        c = eng.counters
        assert c.consultations == 1 and c.per_layer_lookups[99] == 1
        assert c.cache_hit_unallocated == 1
        fetched = [l.slice_reads - b for l, b in zip(chain.layers, reads_before)]
        assert fetched[3] == 1
        assert fetched[99] == 1
        assert sum(fetched) == 2
        vanilla = VanillaEngine(chain)
        vanilla.lookup(cluster * CS)
        assert vanilla.counters.consultations == 97


def test_scalable_unallocated_no_backing_fetch(tmp_path):
    with journey_chain(tmp_path, scalable=True) as chain:
        eng = ScalableEngine(chain)
        assert eng.lookup(30 * CS) is None
        assert eng.counters.slice_fetches == 1


def test_scalable_requires_flag(tmp_path):
    with journey_chain(tmp_path) as chain:
        with pytest.raises(EngineError):
            ScalableEngine(chain)


def test_cache_correct_examples():
    sv = np.array([0x10000 | 1 << 48, 2 << 48 | 0x20000, 7 << 48 | 0x30000], dtype=np.uint64)
    same = sv.copy()
    assert cache_correct(same, sv.copy(), 8, 8) == 0
    assert np.array_equal(same, sv)
    sv2 = np.array([2 << 48 | 0x20000], dtype=np.uint64)
    cache_correct(sv2, np.array([5 << 48 | 0x50000], dtype=np.uint64), 8, 5)
    assert int(sv2[0]) == 5 << 48 | 0x50000
    sv3 = np.array([7 << 48 | 0x70000], dtype=np.uint64)
    cache_correct(sv3, np.array([5 << 48 | 0x50000], dtype=np.uint64), 8, 5)
    assert int(sv3[0]) == 7 << 48 | 0x70000


def test_correction_never_decreases_index():
    rng = np.random.default_rng(0)
    for _ in range(200):
        sv = np.where(rng.random(64) < 0.7, rng.integers(1, 9, 64).astype(np.uint64) << np.uint64(48)
                      | np.uint64(CS), np.uint64(0)).astype(np.uint64)
        sb = np.where(rng.random(64) < 0.7, rng.integers(1, 9, 64).astype(np.uint64) << np.uint64(48)
                      | np.uint64(2 * CS), np.uint64(0)).astype(np.uint64)
        before = sv >> np.uint64(48)
        cache_correct(sv, sb, 9, 4)
        assert np.all((sv >> np.uint64(48)) >= before)


def test_correction_marks_slice_dirty(tmp_path):
    with journey_chain(tmp_path, scalable=True) as chain:
        eng = ScalableEngine(chain)
        eng.lookup(0)
        sl = eng.cache.peek(eng.cache.keys()[0])
        assert sl.dirty
        assert eng.counters.corrections == 1


def test_correction_never_skips_fetch(tmp_path):
    with journey_chain(tmp_path, scalable=True) as chain:
        eng = ScalableEngine(chain, correction="never")
        assert eng.lookup(0)[0] == 0
        assert eng.counters.slice_fetches == 1
        assert eng.counters.cache_hit_unallocated == 1


@pytest.mark.parametrize("Engine,scalable", [(VanillaEngine, False), (ScalableEngine, True)])
def test_cow_partial_write(tmp_path, Engine, scalable):
    with journey_chain(tmp_path, scalable=scalable) as chain:
        eng = Engine(chain)
        eng.write(1000, b"\xee" * 50)
        assert eng.lookup(1000)[0] == 2
        data = eng.read(0, CS)
        assert data == b"\x01" * 1000 + b"\xee" * 50 + b"\x01" * (CS - 1050)
        # the base copy is untouched
        assert chain.layers[0].read_data(chain.layers[0].read_entry(0, 0) & ((1 << 48) - 1), 4) == b"\x01" * 4


@pytest.mark.parametrize("Engine,scalable", [(VanillaEngine, False), (ScalableEngine, True)])
def test_write_unallocated_zero_fills(tmp_path, Engine, scalable):
    with journey_chain(tmp_path, scalable=scalable) as chain:
        eng = Engine(chain)
        assert eng.read(20 * CS, 100) == bytes(100)
        eng.write(20 * CS + 10, b"abc")
        assert eng.read(20 * CS + 10, 3) == b"abc"
        assert eng.read(20 * CS, 10) == bytes(10)
        assert eng.read(20 * CS + 13, CS - 13) == bytes(CS - 13)


def test_read_spanning_layers(tmp_path):
    with journey_chain(tmp_path) as chain:
        data = VanillaEngine(chain).read(CS - 3, 6)
        assert data == b"\x01" * 3 + b"\x02" * 3


def test_scalable_write_entry_tagged(tmp_path):
    with journey_chain(tmp_path, scalable=True) as chain:
        eng = ScalableEngine(chain)
        eng.write(0, b"z")
        raw = chain.active.read_entry(0, 0)
        assert raw >> OFFSET_BITS == 3
        sl = eng.cache.peek(eng.cache.keys()[0])
        assert int(sl.entries[0]) == raw and sl.dirty


def test_readonly_chain_rejects_write(tmp_path):
    journey_chain(tmp_path).close()
    with open_chain(str(tmp_path / "l2.sqd")) as chain:
        with pytest.raises(EngineError):
            VanillaEngine(chain).write(0, b"x")


def test_out_of_range(tmp_path):
    with journey_chain(tmp_path) as chain:
        with pytest.raises(FormatError):
            VanillaEngine(chain).read(4 * MiB - 1, 2)


def test_corrupt_index_detected(tmp_path):
    with journey_chain(tmp_path, scalable=True) as chain:
        chain.active.write_entry(0, 7, CS | (9 << OFFSET_BITS))
        with pytest.raises(CorruptionError):
            ScalableEngine(chain).lookup(7 * CS)


def test_restart_after_flush(tmp_path):
    spec, active = build_chain(tmp_path, size=8 * MiB, length=6, fill_pct=70, seed=8, mode="scalable")
    with open_chain(active, writable=True) as chain:
        eng = ScalableEngine(chain)
        first = [eng.lookup(c * CS) for c in range(spec.n_clusters)]
        eng.write(3 * CS + 7, b"hello")
        first[3] = eng.lookup(3 * CS)
        assert eng.flush() > 0
        eng.close()
    with open_chain(active, writable=True) as chain:
        eng = ScalableEngine(chain)
        assert [eng.lookup(c * CS) for c in range(spec.n_clusters)] == first
        # persisted corrections leave nothing to change
        assert eng.counters.corrections == 0 or eng.counters.noop_corrections == eng.counters.corrections
        assert eng.read(3 * CS + 7, 5) == b"hello"


def test_vanilla_restart_after_write(tmp_path):
    with journey_chain(tmp_path) as chain:
        eng = VanillaEngine(chain, cache_bytes=4096 * 3)
        for c in range(10, 30):
            eng.write(c * CS, bytes([c]) * 10)
        eng.close()
    with open_chain(str(tmp_path / "l2.sqd")) as chain:
        eng = VanillaEngine(chain)
        for c in range(10, 30):
            assert eng.read(c * CS, 10) == bytes([c]) * 10


def test_fallback_walk_on_missing_coverage(tmp_path):
    spec, active = build_chain(tmp_path, size=4 * MiB, length=3, fill_pct=80, seed=2, mode="scalable")
    oracle = FlatOracle.from_spec(spec)
    with open_chain(active, writable=True) as chain:
        snapshot_vanilla(chain)
        h = chain.active.header
        chain.active.write_header(ImageHeader(disk_size=h.disk_size, cluster_bits=h.cluster_bits, flags=1,
                                              chain_index=h.chain_index, backing_ref=h.backing_ref))
        eng = ScalableEngine(chain)
        assert full_read(eng) == oracle.read(0, spec.size)
        assert eng.counters.fallback_walks == spec.n_clusters
        eng.write(5, b"qq")
        oracle.write(5, b"qq")
        # the write materialised the merged table, so lookups are direct again
        eng2 = ScalableEngine(chain)
        assert full_read(eng2) == oracle.read(0, spec.size)
        assert eng2.counters.fallback_walks == 0


def test_readonly_scalable_skips_writeback(tmp_path):
    _, active = build_chain(tmp_path, size=64 * MiB, length=4, fill_pct=20, seed=3, mode="scalable")
    with open_chain(active) as chain:
        eng = ScalableEngine(chain, cache_bytes=4096)
        full_read(eng)
        eng.close()
        assert eng.writebacks_skipped > 0


def test_resident_bytes_vanilla_split(tmp_path):
    _, active = build_chain(tmp_path, size=64 * MiB, length=4, fill_pct=50, seed=1)
    with open_chain(active) as chain:
        eng = VanillaEngine(chain, cache_bytes=16 * 4096)
        assert all(c.capacity_bytes == 4 * 4096 for c in eng.caches())
        full_read(eng)
        assert eng.resident_bytes() <= 16 * 4096
        fixed = VanillaEngine(chain, per_layer_bytes=8192)
        assert all(c.capacity_bytes == 8192 for c in fixed.caches())


def test_simulated_cost_charges():
    p = LatencyModelParams()
    assert p.miss_cost == 80_000 + 1_000 + 81_000


def run_differential(tmp_path, name, size, length, fill, seed, ops, cache_bytes=1 << 20):
    """Replay one random trace on vanilla, scalable and the oracle; returns lookup counters."""
    van_spec, van_active = build_chain(tmp_path, name + "-v", size=size, length=length,
                                       fill_pct=fill, seed=seed, mode="vanilla")
    _, sc_active = build_chain(tmp_path, name + "-s", size=size, length=length,
                               fill_pct=fill, seed=seed, mode="scalable")
    oracle = FlatOracle.from_spec(van_spec)
    rng = np.random.default_rng(seed + 1000)
    with open_chain(van_active, writable=True) as vc, open_chain(sc_active, writable=True) as sc:
        ve = VanillaEngine(vc, cache_bytes=cache_bytes)
        se = ScalableEngine(sc, cache_bytes=cache_bytes)
        for kind, off, arg in random_trace(rng, size, ops, max_len=min(200_000, size // 2)):
            if kind == "w":
                ve.write(off, arg)
                se.write(off, arg)
                oracle.write(off, arg)
            else:
                want = oracle.read(off, arg)
                assert ve.read(off, arg) == want
                assert se.read(off, arg) == want
        return ve.counters, se.counters


@pytest.mark.parametrize("seed", range(6))
def test_differential_small(tmp_path, seed):
    length = [1, 2, 5, 8, 3, 12][seed]
    _, sc = run_differential(tmp_path, "d", 4 * MiB, length, 60, seed, 60, cache_bytes=2 * 4096)
    assert sc.max_lookup_consults == 1
    assert sc.max_lookup_fetches <= 2


def test_stream_then_write(tmp_path):
    spec, active = build_chain(tmp_path, size=4 * MiB, length=5, fill_pct=60, seed=12, mode="scalable")
    oracle = FlatOracle.from_spec(spec)
    with open_chain(active, writable=True) as chain:
        stream(chain, 0, 2)
        eng = ScalableEngine(chain)
        eng.write(CS * 7 + 3, b"after")
        oracle.write(CS * 7 + 3, b"after")
        eng.close()
        assert full_read(ScalableEngine(chain)) == oracle.read(0, spec.size)
        assert full_read(VanillaEngine(chain)) == oracle.read(0, spec.size)
