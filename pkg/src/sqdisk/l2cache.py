"""Slice-granular L2 metadata cache.

Fully associative, LRU eviction, per-slice use counts (pinned slices are
never evicted) and dirty write-back on eviction or :meth:`L2Cache.flush_all`.
The same class serves as one cache per layer (plain engine) or as the
single unified cache (scalable engine); only the ``layer_tag`` of the keys
differs.
"""
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .imgfmt import L2_ENTRY_SIZE

DEFAULT_SLICE_ENTRIES = 512
DEFAULT_CACHE_BYTES = 1 << 20


class SliceKey(NamedTuple):
    layer_tag: int
    l1_index: int
    slice_no: int


@dataclass(eq=False)
class CachedSlice:
    key: SliceKey
    entries: np.ndarray
    ref: int = 0
    dirty: bool = False
    lru_stamp: int = 0


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    inserts: int = 0
    evictions: int = 0
    writebacks: int = 0
    writeback_bytes: int = 0
    peak_bytes: int = 0


class CacheFullError(RuntimeError):
    """Every resident slice is pinned and there is no room for another one."""


class L2Cache:
    def __init__(self, capacity_bytes=DEFAULT_CACHE_BYTES, slice_entries=DEFAULT_SLICE_ENTRIES,
                 writeback=None):
        slice_bytes = slice_entries * L2_ENTRY_SIZE
        if capacity_bytes < slice_bytes:
            raise ValueError("cache capacity %d B is smaller than one %d B slice" % (capacity_bytes, slice_bytes))
        self.capacity_bytes = capacity_bytes
        self.slice_entries = slice_entries
        self.slice_bytes = slice_bytes
        self.capacity_slices = capacity_bytes // slice_bytes
        self.writeback = writeback
        self.stats = CacheStats()
        self._slices = OrderedDict()  # oldest first
        self._clock = 0

    def __len__(self):
        return len(self._slices)

    def __contains__(self, key):
        return key in self._slices

    def keys(self):
        """Resident keys, least recently used first."""
        return list(self._slices)

    def peek(self, key):
        """Resident slice for ``key`` without touching LRU order, refs or stats."""
        return self._slices.get(key)

    def _touch(self, sl):
        self._clock += 1
        sl.lru_stamp = self._clock
        self._slices.move_to_end(sl.key)

    def get(self, key):
        sl = self._slices.get(key)
        if sl is None:
            self.stats.misses += 1
            return None
        self.stats.hits += 1
        sl.ref += 1
        self._touch(sl)
        return sl

    def insert(self, key, entries):
        entries = np.asarray(entries, dtype=np.uint64)
        if entries.shape != (self.slice_entries,):
            raise ValueError("a slice holds exactly %d entries" % self.slice_entries)
        sl = self._slices.get(key)
        if sl is not None:
            sl.entries = entries.copy()
            sl.ref += 1
            self._touch(sl)
            return sl
        if len(self._slices) >= self.capacity_slices and self._victim() is None:
            raise CacheFullError("all %d resident slices are pinned" % len(self._slices))
        sl = CachedSlice(key, entries.copy(), ref=1)
        self._slices[key] = sl
        self._touch(sl)
        self.stats.inserts += 1
        self.stats.peak_bytes = max(self.stats.peak_bytes, self.resident_bytes())
        while len(self._slices) > self.capacity_slices:
            self._evict(self._victim())
        return sl

    def _victim(self):
        for sl in self._slices.values():
            if sl.ref == 0:
                return sl
        return None

    def _evict(self, sl):
        if sl.dirty:
            self._write_back(sl)
        del self._slices[sl.key]
        self.stats.evictions += 1

    def _write_back(self, sl):
        if self.writeback is not None:
            self.writeback(sl.key, sl.entries)
        self.stats.writebacks += 1
        self.stats.writeback_bytes += self.slice_bytes
        sl.dirty = False

    def _resident(self, key):
        sl = self._slices.get(key)
        if sl is None:
            raise KeyError("slice %r is not resident" % (key,))
        return sl

    def release(self, key):
        sl = self._resident(key)
        if sl.ref > 0:
            sl.ref -= 1

    def mark_dirty(self, key):
        self._resident(key).dirty = True

    def flush_all(self):
        n = 0
        for sl in self._slices.values():
            if sl.dirty:
                self._write_back(sl)
                n += 1
        return n

    def drop_all(self):
        """Forget every slice without writing anything back."""
        self._slices.clear()

    def resident_bytes(self):
        # data portion only; per-slice bookkeeping is not counted
        return len(self._slices) * self.slice_bytes
