"""Flat-image oracle and small chain builders shared by the tests."""
import os

import numpy as np

from sqdisk.bench import ChainSpec, genchain


class FlatOracle:
    """Plain byte-array model of a virtual disk.

    Cluster contents are filled in lazily from ``initial(cluster)`` so a
    sparse 1 GiB disk does not need a gigabyte of RAM.
    """

    def __init__(self, disk_size, cluster_bits=16, initial=None):
        self.disk_size = disk_size
        self.cluster_size = 1 << cluster_bits
        self.initial = initial
        self.clusters = {}

    @classmethod
    def from_spec(cls, spec):
        owners = spec.layout()

        def initial(cluster):
            return spec.cluster_data(cluster, int(owners[cluster]))

        return cls(spec.size, spec.cluster_bits, initial)

    def _cluster(self, index):
        buf = self.clusters.get(index)
        if buf is None:
            data = self.initial(index) if self.initial else bytes(self.cluster_size)
            buf = self.clusters[index] = bytearray(data)
        return buf

    def read(self, offset, length):
        out = bytearray()
        pos, end = offset, offset + length
        while pos < end:
            c, intra = divmod(pos, self.cluster_size)
            n = min(self.cluster_size - intra, end - pos)
            out += self._cluster(c)[intra:intra + n]
            pos += n
        return bytes(out)

    def write(self, offset, data):
        pos = offset
        view = memoryview(data)
        while view:
            c, intra = divmod(pos, self.cluster_size)
            n = min(self.cluster_size - intra, len(view))
            self._cluster(c)[intra:intra + n] = view[:n]
            view = view[n:]
            pos += n


def build_chain(tmp_path, name="chain", **kw):
    """Generate a chain under ``tmp_path/name``; returns (spec, active path)."""
    spec = ChainSpec(**kw)
    out = os.path.join(str(tmp_path), name)
    return spec, genchain(spec, out)


def full_read(engine, block=1 << 20):
    parts = []
    for off in range(0, engine.disk_size, block):
        parts.append(engine.read(off, min(block, engine.disk_size - off)))
    return b"".join(parts)


def random_trace(rng, disk_size, ops, max_len=200_000):
    """List of ('r'|'w', offset, length) tuples; writes carry their payload."""
    trace = []
    for _ in range(ops):
        n = int(rng.integers(1, max_len))
        off = int(rng.integers(0, disk_size - n))
        if rng.random() < 0.4:
            trace.append(("w", off, rng.integers(0, 256, n, dtype=np.uint8).tobytes()))
        else:
            trace.append(("r", off, n))
    return trace
