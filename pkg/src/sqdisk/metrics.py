"""Counters, lookup-latency histograms, reports and the two analytic models."""
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

from .imgfmt import L2_ENTRY_SIZE, clusters_in, empty_volume_size

NS = 1
US = 1_000
MS = 1_000_000

REPORT_COLUMNS = [
    "engine", "chain_len", "cache_bytes", "ops", "hits", "misses", "hit_unalloc",
    "slice_fetches", "absent_table", "fallback_walks", "resident_bytes_peak",
    "mean_lookup_ns", "p99_lookup_ns",
]
EXTRA_COLUMNS = ["sim_seconds", "throughput_mbps"]
_INT_COLUMNS = set(REPORT_COLUMNS) - {"engine", "mean_lookup_ns", "p99_lookup_ns"}


@dataclass
class IoCounters:
    """Event counts for one engine run.

    Every layer consultation ends in exactly one of ``cache_hit``,
    ``cache_hit_unallocated`` or ``absent_table``; ``cache_miss`` is counted
    on top of that whenever the slice had to be fetched first.
    """
    cache_hit: int = 0
    cache_miss: int = 0
    cache_hit_unallocated: int = 0
    slice_fetches: int = 0
    absent_table: int = 0
    fallback_walks: int = 0
    per_layer_lookups: list = field(default_factory=list)
    cache_resident_bytes_peak: int = 0
    snapshot_bytes_written: int = 0
    lookups: int = 0
    ops: int = 0
    corrections: int = 0
    noop_corrections: int = 0
    max_lookup_consults: int = 0
    max_lookup_fetches: int = 0
    sim_lookup_ns: float = 0.0

    @classmethod
    def for_chain(cls, length):
        return cls(per_layer_lookups=[0] * length)

    @property
    def consultations(self):
        return self.cache_hit + self.cache_hit_unallocated + self.absent_table

    def snapshot(self):
        """Copy by value."""
        return replace(self, per_layer_lookups=list(self.per_layer_lookups))

    def as_dict(self):
        return asdict(self)


@dataclass
class LatencyModelParams:
    """Inputs of the average lookup cost model; times in nanoseconds."""
    t_mem: float = 100.0
    t_disk: float = 80_000.0
    t_layers: float = 1_000.0
    t_fetch: float = None
    hit: float = 0.0
    miss: float = 0.0
    unalloc: float = 0.0
    n: float = 1.0

    def __post_init__(self):
        if self.t_fetch is None:
            self.t_fetch = self.t_disk + self.t_layers
        for name in ("t_mem", "t_disk", "t_layers", "t_fetch", "n"):
            if getattr(self, name) < 0:
                raise ValueError("%s must be >= 0" % name)
        for name in ("hit", "miss", "unalloc"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError("%s must be a fraction in [0, 1]" % name)

    @property
    def miss_cost(self):
        return self.t_disk + self.t_layers + self.t_fetch


def predict_avg_cost(p):
    """Average lookup cost: per-event costs weighted by event ratios, times the walk length."""
    return (p.hit * p.t_mem + p.miss * (p.t_disk + p.t_layers + p.t_fetch) + p.unalloc * p.t_fetch) * p.n


def params_from_counters(counters, base=None):
    """Model inputs measured from a run.

    Ratios are per layer consultation and ``n`` is the mean number of
    consultations per lookup; it equals the chain length when every lookup
    walks the whole chain and 1 for the unified cache.
    """
    base = base or LatencyModelParams()
    consults = counters.consultations
    if consults == 0 or counters.lookups == 0:
        return replace(base, hit=0.0, miss=0.0, unalloc=0.0, n=0.0)
    return replace(base,
                   hit=counters.cache_hit / consults,
                   miss=counters.cache_miss / consults,
                   unalloc=counters.cache_hit_unallocated / consults,
                   n=consults / counters.lookups)


def predict_snapshot_size(disk_size, cluster_bits, l2_entry_size=L2_ENTRY_SIZE, s_vq=None):
    """Worst-case size of a new layer that carries a copy of every L2 entry.

    ``s_vq`` is the size of an empty plain layer; it defaults to this
    format's header cluster plus L1 region.
    """
    if disk_size <= 0 or l2_entry_size <= 0:
        raise ValueError("disk size and entry size must be positive")
    if s_vq is None:
        s_vq = empty_volume_size(disk_size, cluster_bits)
    return s_vq + clusters_in(disk_size, cluster_bits) * l2_entry_size


def snapshot_overhead(disk_size, cluster_bits, l2_entry_size=L2_ENTRY_SIZE):
    return clusters_in(disk_size, cluster_bits) * l2_entry_size


class LatencyHistogram:
    """Log-scaled histogram, ``SUB`` buckets per power of two."""

    SUB = 8

    def __init__(self):
        self.buckets = {}
        self.count = 0
        self.total = 0.0
        self.max = 0.0

    def _bucket(self, value):
        if value < 1:
            return 0
        return int(math.floor(math.log2(value) * self.SUB)) + 1

    def _upper(self, bucket):
        if bucket == 0:
            return 1.0
        return 2.0 ** (bucket / self.SUB)

    def add(self, value):
        b = self._bucket(value)
        self.buckets[b] = self.buckets.get(b, 0) + 1
        self.count += 1
        self.total += value
        if value > self.max:
            self.max = value

    @property
    def mean(self):
        return self.total / self.count if self.count else 0.0

    def quantile(self, q):
        if not self.count:
            return 0.0
        rank = max(1, math.ceil(q * self.count))
        seen = 0
        for b in sorted(self.buckets):
            seen += self.buckets[b]
            if seen >= rank:
                return min(self._upper(b), self.max)
        return self.max

    def items(self):
        """(upper bound, count) pairs in ascending order."""
        return [(self._upper(b), self.buckets[b]) for b in sorted(self.buckets)]


def report_row(engine, chain_len, cache_bytes, counters, histogram=None, sim_seconds=0.0, nbytes=0):
    hist = histogram or LatencyHistogram()
    row = {
        "engine": engine,
        "chain_len": chain_len,
        "cache_bytes": cache_bytes,
        "ops": counters.ops,
        "hits": counters.cache_hit,
        "misses": counters.cache_miss,
        "hit_unalloc": counters.cache_hit_unallocated,
        "slice_fetches": counters.slice_fetches,
        "absent_table": counters.absent_table,
        "fallback_walks": counters.fallback_walks,
        "resident_bytes_peak": counters.cache_resident_bytes_peak,
        "mean_lookup_ns": round(hist.mean, 3),
        "p99_lookup_ns": round(hist.quantile(0.99), 3),
        "sim_seconds": round(sim_seconds, 9),
        "throughput_mbps": round(nbytes / sim_seconds / 1e6, 6) if sim_seconds > 0 else 0.0,
    }
    return row


def report(rows, fmt="csv"):
    """Serialise report rows as CSV (fixed columns) or JSON."""
    if isinstance(rows, dict):
        rows = [rows]
    if fmt == "json":
        return json.dumps(rows, indent=2, sort_keys=True) + "\n"
    if fmt != "csv":
        raise ValueError("unknown report format %r" % fmt)
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=REPORT_COLUMNS + EXTRA_COLUMNS, extrasaction="ignore",
                       lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row.get(k, 0) for k in REPORT_COLUMNS + EXTRA_COLUMNS})
    return out.getvalue()


def parse_report(text, fmt="csv"):
    if fmt == "json":
        return json.loads(text)
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in rec.items():
            if k == "engine":
                row[k] = v
            elif k in _INT_COLUMNS:
                row[k] = int(v)
            else:
                row[k] = float(v)
        rows.append(row)
    return rows


def empty_row(engine="", chain_len=0, cache_bytes=0):
    return report_row(engine, chain_len, cache_bytes, IoCounters())


def counter_fields():
    return [f.name for f in fields(IoCounters)]
