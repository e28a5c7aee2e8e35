"""Block-device plumbing shared by both lookup engines.

Reads and writes are split at cluster boundaries; each piece costs one
lookup. Writes to a cluster not owned by the active volume copy the old
cluster into a freshly allocated one first.

Lookup cost is simulated: every cache event is charged a fixed latency
taken from a :class:`~sqdisk.metrics.LatencyModelParams` (hit ``t_mem``,
miss ``t_disk + t_layers + t_fetch``, hit-unallocated ``t_fetch``), so the
numbers are deterministic and independent of the host.
"""
from .imgfmt import OFFSET_BITS, OFFSET_MASK, AddressError, check_slice_entries, translate
from .l2cache import DEFAULT_CACHE_BYTES, DEFAULT_SLICE_ENTRIES
from .metrics import IoCounters, LatencyHistogram, LatencyModelParams


class EngineError(RuntimeError):
    pass


class CorruptionError(EngineError):
    """An L2 entry names a layer that is not below the active volume."""


class BlockEngine:
    name = "base"

    def __init__(self, chain, cache_bytes=DEFAULT_CACHE_BYTES, slice_entries=DEFAULT_SLICE_ENTRIES,
                 latency=None):
        self.chain = chain
        self.layers = chain.layers
        self.cluster_bits = chain.cluster_bits
        self.cluster_size = 1 << self.cluster_bits
        self.disk_size = chain.disk_size
        check_slice_entries(slice_entries, self.cluster_bits)
        self.slice_entries = slice_entries
        self.cache_bytes = cache_bytes
        self.latency = latency or LatencyModelParams()
        self.counters = IoCounters.for_chain(len(self.layers))
        self.histogram = LatencyHistogram()
        self._resident = 0
        self._cost = 0.0
        self._consults = 0
        self._fetches = 0

    # -- accounting --------------------------------------------------------

    def _begin(self):
        self._cost = 0.0
        self._consults = 0
        self._fetches = 0

    def _finish(self):
        c = self.counters
        c.lookups += 1
        c.sim_lookup_ns += self._cost
        self.histogram.add(self._cost)
        if self._consults > c.max_lookup_consults:
            c.max_lookup_consults = self._consults
        if self._fetches > c.max_lookup_fetches:
            c.max_lookup_fetches = self._fetches

    def _consult(self, layer_index):
        self._consults += 1
        self.counters.per_layer_lookups[layer_index] += 1

    def _hit(self):
        self.counters.cache_hit += 1
        self._cost += self.latency.t_mem

    def _miss(self):
        self.counters.cache_miss += 1
        self._cost += self.latency.miss_cost

    def _unallocated(self):
        self.counters.cache_hit_unallocated += 1
        self._cost += self.latency.t_fetch

    def _absent(self):
        self.counters.absent_table += 1
        self._cost += self.latency.t_mem

    def _fetch_slice(self, layer, l1_index, slice_no):
        self.counters.slice_fetches += 1
        self._fetches += 1
        return layer.read_slice(l1_index, slice_no, self.slice_entries)

    def _insert(self, cache, key, entries):
        before = cache.resident_bytes()
        sl = cache.insert(key, entries)
        self._resident += cache.resident_bytes() - before
        if self._resident > self.counters.cache_resident_bytes_peak:
            self.counters.cache_resident_bytes_peak = self._resident
        return sl

    def _coords(self, vb):
        return translate(vb, self.cluster_bits, self.slice_entries, self.disk_size)

    # -- lookup ------------------------------------------------------------

    def lookup(self, vb):
        """Owner of the cluster holding guest byte ``vb``.

        Returns ``(layer_index, host_offset)`` or None for an unallocated
        cluster.
        """
        co = self._coords(vb)
        self._begin()
        try:
            return self._lookup(co)
        finally:
            self._finish()

    def _lookup(self, co):
        raise NotImplementedError

    # -- block device ------------------------------------------------------

    def _check_range(self, offset, length):
        if offset < 0 or length < 0 or offset + length > self.disk_size:
            raise AddressError("range %d+%d outside disk of %d bytes" % (offset, length, self.disk_size))

    def read(self, offset, length):
        self._check_range(offset, length)
        out = bytearray(length)
        pos, end = offset, offset + length
        cs = self.cluster_size
        while pos < end:
            intra = pos & (cs - 1)
            n = min(cs - intra, end - pos)
            loc = self.lookup(pos)
            if loc is not None:
                layer, host = loc
                out[pos - offset:pos - offset + n] = self.layers[layer].read_data(host + intra, n)
            pos += n
        self.counters.ops += 1
        return bytes(out)

    def readinto(self, offset, buf):
        data = self.read(offset, len(buf))
        buf[:] = data
        return len(data)

    def write(self, offset, data):
        if not self.chain.writable:
            raise EngineError("chain is open read-only")
        self._check_range(offset, len(data))
        data = memoryview(bytes(data))
        pos, end = offset, offset + len(data)
        cs = self.cluster_size
        active_index = len(self.layers) - 1
        active = self.layers[active_index]
        while pos < end:
            intra = pos & (cs - 1)
            n = min(cs - intra, end - pos)
            piece = data[pos - offset:pos - offset + n]
            loc = self.lookup(pos)
            if loc is not None and loc[0] == active_index:
                active.write_data(loc[1] + intra, piece)
            else:
                if loc is None:
                    buf = bytearray(cs)
                else:
                    buf = bytearray(self.layers[loc[0]].read_data(loc[1], cs))
                buf[intra:intra + n] = piece
                host = active.alloc_cluster()
                active.write_data(host, buf)
                tag = active_index + 1 if active.scalable else 0
                self._set_active_entry(self._coords(pos), host | (tag << OFFSET_BITS))
            pos += n
        self.counters.ops += 1
        return len(data)

    def _active_slot(self, co):
        """(cache, key) under which the active volume's slice for ``co`` lives."""
        raise NotImplementedError

    def _ensure_active_table(self, l1_index):
        self.layers[-1].ensure_table(l1_index)

    def _set_active_entry(self, co, raw):
        active = self.layers[-1]
        self._ensure_active_table(co.l1_index)
        active.write_entry(co.l1_index, co.l2_index, raw)
        cache, key = self._active_slot(co)
        sl = cache.get(key)
        if sl is None:
            self.counters.slice_fetches += 1
            sl = self._insert(cache, key, active.read_slice(co.l1_index, co.slice_no, self.slice_entries))
        else:
            sl.entries[co.l2_slice_index] = raw
        cache.mark_dirty(key)
        cache.release(key)

    def flush(self):
        return sum(c.flush_all() for c in self.caches())

    def caches(self):
        raise NotImplementedError

    def resident_bytes(self):
        return sum(c.resident_bytes() for c in self.caches())

    def close(self):
        if self.chain.writable:
            self.flush()


def host_offset(raw):
    return raw & OFFSET_MASK
