"""Direct-access engine: one unified cache over the active volume's tables.

Every allocated entry in the active volume names the layer that owns the
data, so a lookup never walks the chain. When the entry points below the
active volume, the owner's slice at the same coordinates is fetched and
merged into the cached slice (cache correction).
"""
from . import kernels
from .chainstore import merged_table
from .engine_base import BlockEngine, CorruptionError, EngineError
from .imgfmt import OFFSET_MASK, entry_owner
from .l2cache import DEFAULT_CACHE_BYTES, DEFAULT_SLICE_ENTRIES, L2Cache, SliceKey

UNIFIED_TAG = 0


def cache_correct(sv, sb, sv_tag, sb_tag):
    """Merge backing slice ``sb`` into resident slice ``sv`` in place.

    Position ``j`` takes ``sb[j]`` when ``sb[j]`` is allocated and the
    backing index at ``sv[j]`` is lower than or equal to the one at
    ``sb[j]``. Entries without a stored index count as ``sv_tag`` and
    ``sb_tag`` respectively (the index of the layer they were read from,
    plus one). Returns the number of positions whose value changed.
    """
    return kernels.correct_slice(sv, sb, sv_tag, sb_tag)


class ScalableEngine(BlockEngine):
    name = "scalable"

    def __init__(self, chain, cache_bytes=DEFAULT_CACHE_BYTES, slice_entries=DEFAULT_SLICE_ENTRIES,
                 latency=None, correction="always"):
        if not chain.active.scalable:
            raise EngineError("active volume %s lacks the backing-index feature; convert it first"
                              % chain.active.path)
        if correction not in ("always", "never"):
            raise ValueError("correction must be 'always' or 'never'")
        super().__init__(chain, cache_bytes, slice_entries, latency)
        self.correction = correction
        self.cache = L2Cache(cache_bytes, slice_entries, self._writeback)
        self.writebacks_skipped = 0

    def _writeback(self, key, entries):
        active = self.layers[-1]
        if active.writable:
            active.write_slice(key.l1_index, key.slice_no, entries)
        else:
            self.writebacks_skipped += 1

    def caches(self):
        return [self.cache]

    def _active_slot(self, co):
        return self.cache, SliceKey(UNIFIED_TAG, co.l1_index, co.slice_no)

    def _missing_coverage(self, l1_index):
        # every index-complete layer copies its parent's tables, so a table in
        # the parent but not in the active volume means the copy is missing
        return len(self.layers) > 1 and self.layers[-2].l1[l1_index] != 0

    def _lookup(self, co):
        top = len(self.layers) - 1
        active = self.layers[top]
        if active.l1[co.l1_index] == 0:
            if self._missing_coverage(co.l1_index):
                return self._fallback_walk(co)
            self._consult(top)
            self._absent()
            return None
        self._consult(top)
        key = SliceKey(UNIFIED_TAG, co.l1_index, co.slice_no)
        sl = self.cache.get(key)
        if sl is None:
            self._miss()
            sl = self._insert(self.cache, key, self._fetch_slice(active, co.l1_index, co.slice_no))
        try:
            raw = int(sl.entries[co.l2_slice_index])
            owner = entry_owner(raw, top)
            if owner is None:
                self._unallocated()
                return None
            if owner == top:
                self._hit()
                return top, raw & OFFSET_MASK
            if owner > top:
                raise CorruptionError("entry names layer %d in a chain of %d" % (owner, top + 1))
            self._unallocated()
            if self.correction == "always":
                sb = self._fetch_slice(self.layers[owner], co.l1_index, co.slice_no)
                changed = cache_correct(sl.entries, sb, top + 1, owner + 1)
                self.counters.corrections += 1
                if changed == 0:
                    self.counters.noop_corrections += 1
                self.cache.mark_dirty(key)
                raw = int(sl.entries[co.l2_slice_index])
                owner = entry_owner(raw, top)
            return owner, raw & OFFSET_MASK
        finally:
            self.cache.release(key)

    def _fallback_walk(self, co):
        self.counters.fallback_walks += 1
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            self._consult(i)
            if layer.l1[co.l1_index] == 0:
                self._absent()
                continue
            self.counters.slice_fetches += 1
            self._fetches += 1
            raw = layer.read_entry(co.l1_index, co.l2_index)
            owner = entry_owner(raw, i)
            if owner is None:
                self._unallocated()
                continue
            self._hit()
            return owner, raw & OFFSET_MASK
        return None

    def _ensure_active_table(self, l1_index):
        active = self.layers[-1]
        if active.l1[l1_index] != 0:
            return
        view = merged_table(self.layers, l1_index) if self._missing_coverage(l1_index) else None
        active.ensure_table(l1_index)
        if view is not None:
            active.write_table(l1_index, view)
