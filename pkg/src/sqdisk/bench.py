"""Chain generator and the sequential / random read benchmarks."""
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .chainstore import ChainError, convert, create_base, open_chain, snapshot_scalable, snapshot_vanilla
from .engine_scalable import ScalableEngine
from .engine_vanilla import VanillaEngine
from .imgfmt import OFFSET_BITS, clusters_in
from .metrics import LatencyModelParams, report_row

SIDECAR = "chain.json"
ENGINES = {"vanilla": VanillaEngine, "scalable": ScalableEngine}


@dataclass
class ChainSpec:
    """Parameters of a generated chain; enough to rebuild its content."""
    size: int
    cluster_bits: int = 16
    length: int = 1
    fill_pct: float = 90.0
    seed: int = 0
    mode: str = "vanilla"
    distribution: str = "uniform"

    def validate(self):
        if self.size <= 0:
            raise ValueError("size must be positive")
        if not 1 <= self.length < 65535:
            raise ValueError("length must be in 1..65534")
        if not 0.0 <= self.fill_pct <= 100.0:
            raise ValueError("fill-pct must be within 0..100")
        if self.mode not in ("vanilla", "scalable"):
            raise ValueError("mode must be vanilla or scalable")
        if self.distribution != "uniform":
            raise ValueError("only the uniform distribution is supported")

    @property
    def cluster_size(self):
        return 1 << self.cluster_bits

    @property
    def n_clusters(self):
        return clusters_in(self.size, self.cluster_bits)

    def layout(self):
        """Owning layer of every cluster, -1 where unallocated."""
        rng = np.random.default_rng(self.seed)
        allocated = rng.random(self.n_clusters) < self.fill_pct / 100.0
        owners = rng.integers(0, self.length, self.n_clusters)
        return np.where(allocated, owners, -1)

    def cluster_data(self, cluster, owner):
        if owner < 0:
            return bytes(self.cluster_size)
        return kernels.payload(self.seed, cluster, owner, self.cluster_size)


def layer_path(out_dir, index):
    return os.path.join(out_dir, "layer-%05d.sqd" % index)


def _fill_layer(layer, spec, clusters, owner, tag):
    per_table = 1 << (spec.cluster_bits - 3)
    for l1_index in np.unique(clusters // per_table):
        group = clusters[(clusters // per_table) == l1_index]
        layer.ensure_table(int(l1_index))
        table = layer.read_table(int(l1_index))
        for c in group:
            off = layer.alloc_cluster()
            layer.write_data(off, spec.cluster_data(int(c), owner))
            table[int(c) % per_table] = off | (tag << OFFSET_BITS)
        layer.write_table(int(l1_index), table)


def genchain(spec, out_dir):
    """Build the chain described by ``spec`` in ``out_dir``; returns the active volume path."""
    spec.validate()
    if os.path.isdir(out_dir) and os.listdir(out_dir):
        raise ChainError("output directory %s is not empty" % out_dir)
    os.makedirs(out_dir, exist_ok=True)
    owners = spec.layout()
    scalable = spec.mode == "scalable"
    create_base(layer_path(out_dir, 0), spec.size, spec.cluster_bits, scalable=scalable)
    chain = open_chain(layer_path(out_dir, 0), writable=True)
    try:
        for k in range(spec.length):
            if k:
                snap = snapshot_scalable if scalable else snapshot_vanilla
                snap(chain, layer_path(out_dir, k))
            mine = np.nonzero(owners == k)[0]
            if len(mine):
                _fill_layer(chain.active, spec, mine, k, k + 1 if scalable else 0)
        active = chain.active.path
    finally:
        chain.close()
    with open(os.path.join(out_dir, SIDECAR), "w") as f:
        json.dump({"spec": asdict(spec), "active": os.path.basename(active),
                   "allocated": int(np.count_nonzero(owners >= 0))}, f, indent=2, sort_keys=True)
    return active


def load_sidecar(out_dir):
    with open(os.path.join(out_dir, SIDECAR)) as f:
        meta = json.load(f)
    return ChainSpec(**meta["spec"]), os.path.join(out_dir, meta["active"])


def resolve_chain(path):
    """Active volume path for either a chain directory or a layer file."""
    if os.path.isdir(path):
        return load_sidecar(path)[1]
    return path


@dataclass
class BenchResult:
    row: dict
    counters: object
    histogram: object
    wall_seconds: float
    sim_seconds: float
    nbytes: int


def make_engine(chain, engine, cache_bytes, latency=None, **kw):
    if engine not in ENGINES:
        raise ValueError("engine must be one of %s" % ", ".join(ENGINES))
    return ENGINES[engine](chain, cache_bytes=cache_bytes, latency=latency, **kw)


def _open_for_bench(chain_path, engine, convert_first):
    path = resolve_chain(chain_path)
    chain = open_chain(path, writable=True)
    if engine == "scalable" and not chain.scalable:
        if not convert_first:
            chain.close()
            raise ChainError("chain is not in the scalable format; rerun with --convert")
        convert(chain, "scalable")
    return chain


def _latency(fetch_latency_us, slice_service_us=None):
    fetch_ns = fetch_latency_us * 1000.0
    service_ns = fetch_ns if slice_service_us is None else slice_service_us * 1000.0
    # the injected fetch latency stands for disk access plus the stack on top of it
    return LatencyModelParams(t_disk=fetch_ns * 80 / 81, t_layers=fetch_ns / 81, t_fetch=service_ns)


def _run(engine_obj, engine, chain, cache_bytes, ios, io_size, passes=1):
    nbytes = 0
    t0 = time.perf_counter()
    for _ in range(passes):
        for off, n in ios:
            engine_obj.read(off, n)
            nbytes += n
    wall = time.perf_counter() - t0
    c = engine_obj.counters
    sim = wall + c.sim_lookup_ns / 1e9
    row = report_row(engine, chain.length, cache_bytes, c, engine_obj.histogram, sim, nbytes)
    return BenchResult(row, c, engine_obj.histogram, wall, sim, nbytes)


def bench_seq(chain_path, engine="scalable", cache_bytes=1 << 20, block_size=4 << 20,
              fetch_latency_us=81.0, passes=1, convert_first=False, slice_service_us=None,
              engine_kw=None):
    """Sequential full-disk read in ``block_size`` requests."""
    chain = _open_for_bench(chain_path, engine, convert_first)
    try:
        eng = make_engine(chain, engine, cache_bytes, _latency(fetch_latency_us, slice_service_us),
                          **(engine_kw or {}))
        size = chain.disk_size
        ios = [(off, min(block_size, size - off)) for off in range(0, size, block_size)]
        res = _run(eng, engine, chain, cache_bytes, ios, block_size, passes)
        eng.close()
        return res
    finally:
        chain.close()


def random_offsets(disk_size, io_size, ops, seed):
    rng = np.random.default_rng(seed)
    slots = disk_size // io_size
    return [(int(s) * io_size, io_size) for s in rng.integers(0, slots, ops)]


def bench_rand(chain_path, engine="scalable", cache_bytes=1 << 20, io_size=4096, ops=10_000, seed=0,
               fetch_latency_us=81.0, convert_first=False, slice_service_us=None, engine_kw=None):
    """Uniform random reads of ``io_size`` bytes, aligned to ``io_size``."""
    chain = _open_for_bench(chain_path, engine, convert_first)
    try:
        eng = make_engine(chain, engine, cache_bytes, _latency(fetch_latency_us, slice_service_us),
                          **(engine_kw or {}))
        ios = random_offsets(chain.disk_size, io_size, ops, seed)
        res = _run(eng, engine, chain, cache_bytes, ios, io_size)
        eng.close()
        return res
    finally:
        chain.close()


def allocated_clusters(layer):
    """Entries in ``layer`` whose data lives in that same layer."""
    n = 0
    tag = layer.chain_index + 1
    for i in layer.allocated_tables():
        t = layer.read_table(i)
        idx = t >> np.uint64(OFFSET_BITS)
        n += int(np.count_nonzero((t != 0) & ((idx == 0) | (idx == tag))))
    return n


def full_index_bytes(disk_size, cluster_bits, slice_entries=512):
    """Cache size that holds every L2 entry of the disk, rounded up to whole slices."""
    entries = clusters_in(disk_size, cluster_bits)
    slices = -(-entries // slice_entries)
    return slices * slice_entries * 8


def content_hash(chain, block=4 << 20):
    eng = VanillaEngine(chain, cache_bytes=1 << 20)
    h = hashlib.sha256()
    for off in range(0, chain.disk_size, block):
        h.update(eng.read(off, min(block, chain.disk_size - off)))
    return h.hexdigest()
