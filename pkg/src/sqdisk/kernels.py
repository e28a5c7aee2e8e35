"""Array kernels over L2 entry tables and cluster payloads.

Every kernel exists twice: a numba loop (``nb_*``) and a vectorised numpy
version (``np_*``). The public names at the bottom of the module point at
one or the other depending on :data:`sqdisk._accel.USE_NUMBA`.

L2 entries are ``uint64``: bits 0..47 hold the host offset, bits 48..63
hold the owning layer's chain index plus one (0 = no index stored).
"""
import numpy as np

from ._accel import USE_NUMBA, njit

OFFSET_MASK = np.uint64((1 << 48) - 1)
INDEX_SHIFT = np.uint64(48)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_K_CLUSTER = np.uint64(0xD6E8FEB86659FD93)
_K_LAYER = np.uint64(0xA0761D6478BD642F)


def _payload_base(seed, cluster, layer):
    with np.errstate(over="ignore"):
        return (np.uint64(seed) * _GOLDEN) ^ (np.uint64(cluster) * _K_CLUSTER) ^ (np.uint64(layer + 1) * _K_LAYER)


# -- numpy path -------------------------------------------------------------

def np_payload_words(base, nwords):
    with np.errstate(over="ignore"):
        z = base + (np.arange(1, nwords + 1, dtype=np.uint64) * _GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _effective_index(entries, tag):
    idx = entries >> INDEX_SHIFT
    return np.where((idx == 0) & (entries != 0), np.uint64(tag), idx)


def np_correct_slice(sv, sb, sv_tag, sb_tag):
    sv_idx = _effective_index(sv, sv_tag)
    sb_idx = _effective_index(sb, sb_tag)
    replace = (sb != 0) & (sv_idx <= sb_idx)
    new = (sb & OFFSET_MASK) | (sb_idx << INDEX_SHIFT)
    changed = int(np.count_nonzero(replace & (sv != new)))
    sv[replace] = new[replace]
    return changed


def np_merge_view(view, table, tag):
    alloc = table != 0
    new = (table & OFFSET_MASK) | (_effective_index(table, tag) << INDEX_SHIFT)
    view[alloc] = new[alloc]


def np_stamp_unindexed(table, tag):
    mask = (table != 0) & ((table >> INDEX_SHIFT) == 0)
    table[mask] |= np.uint64(tag) << INDEX_SHIFT
    return int(np.count_nonzero(mask))


def np_strip_foreign(table, tag):
    idx = table >> INDEX_SHIFT
    own = (table != 0) & ((idx == 0) | (idx == tag))
    table[own] &= OFFSET_MASK
    table[~own] = 0


def np_remap_stream(table, merged, start, end):
    idx = table >> INDEX_SHIFT
    owner = idx.astype(np.int64) - 1
    inside = (idx != 0) & (owner >= start) & (owner <= end)
    table[inside] = merged[inside]
    above = (idx != 0) & (owner > end)
    shift = np.uint64(end - start) << INDEX_SHIFT
    table[above] -= shift


def np_count_allocated(table):
    return int(np.count_nonzero(table))


# -- numba path -------------------------------------------------------------

@njit
def nb_payload_words(base, nwords):
    out = np.empty(nwords, dtype=np.uint64)
    golden = np.uint64(0x9E3779B97F4A7C15)
    m1 = np.uint64(0xBF58476D1CE4E5B9)
    m2 = np.uint64(0x94D049BB133111EB)
    for i in range(nwords):
        z = base + np.uint64(i + 1) * golden
        z = (z ^ (z >> np.uint64(30))) * m1
        z = (z ^ (z >> np.uint64(27))) * m2
        out[i] = z ^ (z >> np.uint64(31))
    return out


@njit
def nb_correct_slice(sv, sb, sv_tag, sb_tag):
    mask = np.uint64((1 << 48) - 1)
    shift = np.uint64(48)
    changed = 0
    for j in range(sv.shape[0]):
        b = sb[j]
        if b == 0:
            continue
        bi = b >> shift
        if bi == 0:
            bi = np.uint64(sb_tag)
        v = sv[j]
        vi = v >> shift
        if vi == 0 and v != 0:
            vi = np.uint64(sv_tag)
        if vi <= bi:
            new = (b & mask) | (bi << shift)
            if new != v:
                changed += 1
            sv[j] = new
    return changed


@njit
def nb_merge_view(view, table, tag):
    mask = np.uint64((1 << 48) - 1)
    shift = np.uint64(48)
    for j in range(table.shape[0]):
        e = table[j]
        if e == 0:
            continue
        idx = e >> shift
        if idx == 0:
            idx = np.uint64(tag)
        view[j] = (e & mask) | (idx << shift)


@njit
def nb_stamp_unindexed(table, tag):
    shift = np.uint64(48)
    n = 0
    for j in range(table.shape[0]):
        e = table[j]
        if e != 0 and (e >> shift) == 0:
            table[j] = e | (np.uint64(tag) << shift)
            n += 1
    return n


@njit
def nb_strip_foreign(table, tag):
    mask = np.uint64((1 << 48) - 1)
    shift = np.uint64(48)
    own = np.uint64(tag)
    for j in range(table.shape[0]):
        e = table[j]
        idx = e >> shift
        if e != 0 and (idx == 0 or idx == own):
            table[j] = e & mask
        else:
            table[j] = 0


@njit
def nb_remap_stream(table, merged, start, end):
    shift = np.uint64(48)
    delta = np.uint64(end - start) << shift
    for j in range(table.shape[0]):
        idx = np.int64(table[j] >> shift)
        if idx == 0:
            continue
        owner = idx - 1
        if owner > end:
            table[j] -= delta
        elif owner >= start:
            table[j] = merged[j]


@njit
def nb_count_allocated(table):
    n = 0
    for j in range(table.shape[0]):
        if table[j] != 0:
            n += 1
    return n


if USE_NUMBA:
    _payload_words = nb_payload_words
    correct_slice = nb_correct_slice
    merge_view = nb_merge_view
    stamp_unindexed = nb_stamp_unindexed
    strip_foreign = nb_strip_foreign
    remap_stream = nb_remap_stream
    count_allocated = nb_count_allocated
else:
    _payload_words = np_payload_words
    correct_slice = np_correct_slice
    merge_view = np_merge_view
    stamp_unindexed = np_stamp_unindexed
    strip_foreign = np_strip_foreign
    remap_stream = np_remap_stream
    count_allocated = np_count_allocated


def payload(seed, cluster, layer, size):
    """Deterministic pseudo-random bytes for one data cluster.

    The content depends only on ``(seed, cluster, layer)``, so a reference
    image can be rebuilt without storing it.
    """
    nwords = (size + 7) // 8
    words = _payload_words(_payload_base(seed, cluster, layer), nwords)
    return words.view(np.uint8)[:size].tobytes()
