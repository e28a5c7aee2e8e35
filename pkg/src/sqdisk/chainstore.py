"""Snapshot chains on the local filesystem.

A chain is one file per layer. Each layer names its parent through a
relative path in its header, so the active volume alone is enough to open
the whole chain.
"""
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .imgfmt import (
    FLAG_BACKING_INDEX,
    MAX_CHAIN_LENGTH,
    OFFSET_BITS,
    FormatError,
    ImageHeader,
    encode_header,
)
from .layerfile import LayerFile


class ChainError(FormatError):
    """Raised for a chain that cannot be opened or modified as asked."""


@dataclass
class ChainManifest:
    paths: list
    headers: list = field(default_factory=list)

    @property
    def length(self):
        return len(self.paths)

    @property
    def active(self):
        return self.paths[-1]


class Chain:
    """An opened chain, base first. Only the active volume may be writable."""

    def __init__(self, layers, writable):
        self.layers = layers
        self.writable = writable
        self.snapshot_bytes_written = 0
        self.last_snapshot_bytes = 0

    @property
    def manifest(self):
        return ChainManifest([l.path for l in self.layers], [l.header for l in self.layers])

    @property
    def active(self):
        return self.layers[-1]

    @property
    def length(self):
        return len(self.layers)

    def __len__(self):
        return len(self.layers)

    @property
    def disk_size(self):
        return self.active.header.disk_size

    @property
    def cluster_bits(self):
        return self.active.header.cluster_bits

    @property
    def scalable(self):
        return all(l.scalable for l in self.layers)

    def close(self):
        for layer in self.layers:
            layer.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _reload(self, active_path):
        self.close()
        self.layers = _open_layers(active_path, self.writable)


def _relref(path, referrer):
    return os.path.relpath(os.path.abspath(path), os.path.dirname(os.path.abspath(referrer)))


def _open_layers(path, writable):
    chain = []
    seen = set()
    cur = os.path.abspath(path)
    while True:
        real = os.path.realpath(cur)
        if real in seen:
            raise ChainError("cycle in backing references at %s" % cur)
        seen.add(real)
        if not os.path.exists(cur):
            for l in chain:
                l.close()
            raise ChainError("missing backing file %s" % cur)
        try:
            layer = LayerFile(cur, writable=writable and not chain)
        except Exception:
            for l in chain:
                l.close()
            raise
        chain.append(layer)
        ref = layer.header.backing_ref
        if not ref:
            break
        cur = os.path.normpath(os.path.join(os.path.dirname(cur), ref))
    chain.reverse()
    try:
        geometry = (chain[0].header.disk_size, chain[0].header.cluster_bits)
        for i, layer in enumerate(chain):
            if layer.chain_index != i:
                raise ChainError("%s has chain_index %d, expected %d" % (layer.path, layer.chain_index, i))
            if (layer.header.disk_size, layer.header.cluster_bits) != geometry:
                raise ChainError("%s does not match the chain geometry" % layer.path)
    except Exception:
        for l in chain:
            l.close()
        raise
    return chain


def open_chain(path, writable=False):
    return Chain(_open_layers(path, writable), writable)


def _write_empty_volume(path, header):
    """Create a layer holding only its header and a zeroed L1 region; returns bytes written."""
    if os.path.exists(path):
        raise ChainError("%s already exists" % path)
    data = encode_header(header)
    l1 = b"\0" * (header.l1_clusters * header.cluster_size)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
    try:
        n = os.pwrite(fd, data, 0)
        n += os.pwrite(fd, l1, len(data))
    finally:
        os.close(fd)
    return n


def create_base(path, disk_size, cluster_bits=16, scalable=False):
    header = ImageHeader(disk_size=disk_size, cluster_bits=cluster_bits,
                         flags=FLAG_BACKING_INDEX if scalable else 0)
    header.validate()
    _write_empty_volume(path, header)
    return ChainManifest([os.path.abspath(path)], [header])


def _default_snapshot_path(chain):
    d = os.path.dirname(chain.active.path)
    return os.path.join(d, "layer-%05d.sqd" % chain.length)


def _check_snapshot(chain):
    if not chain.writable:
        raise ChainError("chain is open read-only")
    if chain.length >= MAX_CHAIN_LENGTH:
        raise ChainError("chain already holds %d layers" % chain.length)


def _new_top_header(chain, path, scalable):
    old = chain.active.header
    return ImageHeader(disk_size=old.disk_size, cluster_bits=old.cluster_bits,
                       flags=FLAG_BACKING_INDEX if scalable else 0,
                       chain_index=chain.length, backing_ref=_relref(chain.active.path, path))


def snapshot_vanilla(chain, path=None):
    """Stack an empty active volume on top of the chain."""
    _check_snapshot(chain)
    path = os.path.abspath(path or _default_snapshot_path(chain))
    n = _write_empty_volume(path, _new_top_header(chain, path, scalable=False))
    chain.snapshot_bytes_written += n
    chain.last_snapshot_bytes = n
    chain._reload(path)
    return chain.manifest


def snapshot_scalable(chain, path=None):
    """Stack a new active volume carrying a full copy of the old L1/L2 tables.

    Copied entries with no stored index are stamped with the old active
    volume's index, so every allocated entry in the new volume names its
    owner.
    """
    _check_snapshot(chain)
    old = chain.active
    if not old.scalable:
        raise ChainError("active volume lacks the backing-index feature; convert first")
    path = os.path.abspath(path or _default_snapshot_path(chain))
    n = _write_empty_volume(path, _new_top_header(chain, path, scalable=True))
    new = LayerFile(path, writable=True)
    try:
        tag = old.chain_index + 1
        for i in old.allocated_tables():
            table = old.read_table(i)
            kernels.stamp_unindexed(table, tag)
            off = new.alloc_cluster()
            new.pwrite(table.astype("<u8").tobytes(), off)
            new.set_l1(i, off)
        n += new.bytes_written
    finally:
        new.close()
    chain.snapshot_bytes_written += n
    chain.last_snapshot_bytes = n
    chain._reload(path)
    return chain.manifest


def merged_table(layers, l1_index, upto=None):
    """Resolved L2 table at ``l1_index`` as seen from layer ``upto``.

    Every allocated entry in the result carries its owner's index plus one.
    Returns None when no layer up to ``upto`` has a table there.
    """
    upto = len(layers) - 1 if upto is None else upto
    view = None
    for layer in layers[:upto + 1]:
        table = layer.read_table(l1_index)
        if table is None:
            continue
        if view is None:
            view = np.zeros(len(table), dtype=np.uint64)
        kernels.merge_view(view, table, layer.chain_index + 1)
    return view


def convert(chain, target):
    """Rewrite every layer for the scalable or the plain engine; content is unchanged.

    To scalable, each layer receives the resolved table of everything below
    it, with owners stamped. To plain, each layer keeps only its own entries
    with the index bits cleared.
    """
    if target not in ("scalable", "vanilla"):
        raise ValueError("target must be 'scalable' or 'vanilla'")
    active_path = chain.active.path
    writable = chain.writable
    chain.close()
    layers = [LayerFile(p, writable=True) for p in [l.path for l in chain.layers]]
    try:
        n_l1 = layers[0].header.l1_entries
        if target == "scalable":
            for i in range(n_l1):
                view = None
                for layer in layers:
                    table = layer.read_table(i)
                    if table is not None:
                        if view is None:
                            view = np.zeros(len(table), dtype=np.uint64)
                        kernels.merge_view(view, table, layer.chain_index + 1)
                    if view is not None and view.any():
                        layer.ensure_table(i)
                        layer.write_table(i, view)
        else:
            for layer in layers:
                for i in layer.allocated_tables():
                    table = layer.read_table(i)
                    kernels.strip_foreign(table, layer.chain_index + 1)
                    layer.write_table(i, table)
        for layer in layers:
            h = layer.header
            flags = (h.flags | FLAG_BACKING_INDEX) if target == "scalable" else (h.flags & ~FLAG_BACKING_INDEX)
            if flags != h.flags:
                layer.write_header(_with(h, flags=flags))
    finally:
        for layer in layers:
            layer.close()
    chain.writable = writable
    chain.layers = _open_layers(active_path, writable)
    return chain.manifest


def _with(header, **changes):
    d = dict(disk_size=header.disk_size, cluster_bits=header.cluster_bits, flags=header.flags,
             chain_index=header.chain_index, backing_ref=header.backing_ref)
    d.update(changes)
    return ImageHeader(**d)


def stream(chain, start, end):
    """Merge layers ``start..end`` into a single layer; the active volume is never merged.

    The merged layer takes the place (and file path) of layer ``start``.
    Layers above the merged range get their chain index and every stored
    backing index renumbered.
    """
    L = chain.length
    if not 0 <= start <= end < L - 1:
        raise ChainError("stream range %d..%d must lie below the active volume (length %d)" % (start, end, L))
    paths = [l.path for l in chain.layers]
    writable = chain.writable
    chain.close()
    layers = [LayerFile(p, writable=False) for p in paths]
    target = paths[start]
    tmp = target + ".stream-tmp"
    if os.path.exists(tmp):
        os.unlink(tmp)
    scalable = layers[end].scalable
    base_h = layers[start].header
    header = _with(base_h, flags=FLAG_BACKING_INDEX if scalable else 0)
    merged_tables = {}
    try:
        _write_empty_volume(tmp, header)
        out = LayerFile(tmp, writable=True)
        try:
            cs = out.cluster_size
            tag = start + 1
            for i in range(header.l1_entries):
                view = merged_table(layers, i, upto=end)
                if view is None:
                    continue
                new = np.zeros_like(view)
                owners = (view >> np.uint64(OFFSET_BITS)).astype(np.int64) - 1
                alloc = view != 0
                for j in np.nonzero(alloc & (owners >= start))[0]:
                    src = layers[owners[j]]
                    data = src.read_data(int(view[j]) & ((1 << OFFSET_BITS) - 1), cs)
                    off = out.alloc_cluster()
                    out.write_data(off, data)
                    new[j] = off | ((tag if scalable else 0) << OFFSET_BITS)
                if scalable:
                    keep = alloc & (owners < start)
                    new[keep] = view[keep]
                if new.any():
                    out.ensure_table(i)
                    out.write_table(i, new)
                    merged_tables[i] = np.where(alloc & (owners >= start),
                                                (new & np.uint64((1 << OFFSET_BITS) - 1)) | np.uint64(tag << OFFSET_BITS),
                                                np.uint64(0))
        finally:
            out.close()
    finally:
        for layer in layers:
            layer.close()
    os.replace(tmp, target)
    for p in paths[start + 1:end + 1]:
        os.unlink(p)
    shift = end - start
    for j in range(end + 1, L):
        layer = LayerFile(paths[j], writable=True)
        try:
            h = layer.header
            ref = _relref(target, paths[j]) if j == end + 1 else h.backing_ref
            layer.write_header(_with(h, chain_index=h.chain_index - shift, backing_ref=ref))
            for i in layer.allocated_tables():
                table = layer.read_table(i)
                merged = merged_tables.get(i)
                if merged is None:
                    merged = np.zeros_like(table)
                kernels.remap_stream(table, merged, start, end)
                layer.write_table(i, table)
        finally:
            layer.close()
    chain.writable = writable
    chain.layers = _open_layers(paths[-1], writable)
    return chain.manifest
