"""Baseline engine: one L2 cache per layer and a layer-by-layer chain walk."""
from .engine_base import BlockEngine
from .imgfmt import OFFSET_BITS, OFFSET_MASK
from .l2cache import DEFAULT_CACHE_BYTES, DEFAULT_SLICE_ENTRIES, L2Cache, SliceKey


class VanillaEngine(BlockEngine):
    """Walks the chain from the active volume down to the base.

    By default the total cache budget is split evenly across layers (never
    below one slice per layer); pass ``per_layer_bytes`` to give each layer
    a fixed capacity instead.

    Entries carrying a backing index that names another layer are treated
    as unallocated at the layer holding them, so chains in the scalable
    format read correctly here too.
    """

    name = "vanilla"

    def __init__(self, chain, cache_bytes=DEFAULT_CACHE_BYTES, slice_entries=DEFAULT_SLICE_ENTRIES,
                 latency=None, per_layer_bytes=None):
        super().__init__(chain, cache_bytes, slice_entries, latency)
        slice_bytes = slice_entries * 8
        if per_layer_bytes is None:
            per_layer_bytes = cache_bytes // len(self.layers)
        self.per_layer_bytes = max(slice_bytes, per_layer_bytes)
        self._caches = [L2Cache(self.per_layer_bytes, slice_entries, self._writeback_for(i))
                        for i in range(len(self.layers))]

    def _writeback_for(self, index):
        layer = self.layers[index]

        def writeback(key, entries):
            if layer.writable:
                layer.write_slice(key.l1_index, key.slice_no, entries)

        return writeback

    def caches(self):
        return self._caches

    def _active_slot(self, co):
        i = len(self.layers) - 1
        return self._caches[i], SliceKey(i, co.l1_index, co.slice_no)

    def _lookup(self, co):
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            self._consult(i)
            if layer.l1[co.l1_index] == 0:
                self._absent()
                continue
            cache = self._caches[i]
            key = SliceKey(i, co.l1_index, co.slice_no)
            sl = cache.get(key)
            if sl is None:
                self._miss()
                sl = self._insert(cache, key, self._fetch_slice(layer, co.l1_index, co.slice_no))
            raw = int(sl.entries[co.l2_slice_index])
            cache.release(key)
            idx = raw >> OFFSET_BITS
            if raw and (idx == 0 or idx == i + 1):
                self._hit()
                return i, raw & OFFSET_MASK
            self._unallocated()
        return None
