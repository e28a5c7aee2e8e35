"""Positional I/O on one layer file, with byte and fetch accounting."""
import os

import numpy as np

from .imgfmt import (
    HEADER_PREFIX_SIZE,
    L2_ENTRY_SIZE,
    FormatError,
    decode_header,
    encode_header,
    peek_cluster_bits,
)


class LayerFile:
    """An open layer: header, in-RAM L1 table and a bump allocator.

    The whole L1 table is loaded when the file is opened and kept in sync
    with the file on every update.
    """

    def __init__(self, path, writable=False):
        self.path = os.path.abspath(path)
        self.writable = writable
        self.fd = os.open(self.path, os.O_RDWR if writable else os.O_RDONLY)
        self.bytes_read = 0
        self.bytes_written = 0
        self.slice_reads = 0
        try:
            prefix = os.pread(self.fd, HEADER_PREFIX_SIZE, 0)
            cbits = peek_cluster_bits(prefix)
            self.header = decode_header(os.pread(self.fd, 1 << cbits, 0))
            h = self.header
            raw = os.pread(self.fd, h.l1_entries * 8, h.l1_offset)
            if len(raw) != h.l1_entries * 8:
                raise FormatError("truncated L1 table in %s" % self.path)
            self.l1 = np.frombuffer(raw, dtype="<u8").astype(np.uint64)
            size = os.fstat(self.fd).st_size
            cs = h.cluster_size
            self.end = max(-(-size // cs) * cs, h.empty_size)
        except Exception:
            os.close(self.fd)
            self.fd = -1
            raise

    def __repr__(self):
        return "LayerFile(%r, index=%d)" % (self.path, self.header.chain_index)

    @property
    def cluster_size(self):
        return self.header.cluster_size

    @property
    def chain_index(self):
        return self.header.chain_index

    @property
    def scalable(self):
        return self.header.backing_index

    def close(self):
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1

    def _check_writable(self):
        if not self.writable:
            raise PermissionError("layer %s is open read-only" % self.path)

    def pread(self, size, offset):
        data = os.pread(self.fd, size, offset)
        self.bytes_read += len(data)
        if len(data) < size:
            data += b"\0" * (size - len(data))
        return data

    def pwrite(self, data, offset):
        self._check_writable()
        n = os.pwrite(self.fd, data, offset)
        if n != len(data):
            raise OSError("short write to %s" % self.path)
        self.bytes_written += n
        return n

    # -- metadata ----------------------------------------------------------

    def write_header(self, header):
        self.pwrite(encode_header(header), 0)
        self.header = header

    def set_l1(self, l1_index, table_offset):
        self.pwrite(int(table_offset).to_bytes(8, "little"), self.header.l1_offset + 8 * l1_index)
        self.l1[l1_index] = table_offset

    def table_offset(self, l1_index):
        return int(self.l1[l1_index])

    def read_table(self, l1_index):
        off = int(self.l1[l1_index])
        if off == 0:
            return None
        n = self.header.l2_entries
        return np.frombuffer(self.pread(n * L2_ENTRY_SIZE, off), dtype="<u8").astype(np.uint64)

    def write_table(self, l1_index, entries):
        off = int(self.l1[l1_index])
        if off == 0:
            raise FormatError("no L2 table for L1 index %d" % l1_index)
        self.pwrite(np.ascontiguousarray(entries, dtype="<u8").tobytes(), off)

    def ensure_table(self, l1_index):
        """Offset of the L2 table at ``l1_index``, allocating a zeroed one if absent."""
        off = int(self.l1[l1_index])
        if off:
            return off
        off = self.alloc_cluster()
        self.pwrite(b"\0" * self.cluster_size, off)
        self.set_l1(l1_index, off)
        return off

    def read_slice(self, l1_index, slice_no, slice_entries):
        off = int(self.l1[l1_index])
        if off == 0:
            raise FormatError("no L2 table for L1 index %d" % l1_index)
        self.slice_reads += 1
        nbytes = slice_entries * L2_ENTRY_SIZE
        raw = self.pread(nbytes, off + slice_no * nbytes)
        return np.frombuffer(raw, dtype="<u8").astype(np.uint64)

    def write_slice(self, l1_index, slice_no, entries):
        off = int(self.l1[l1_index])
        if off == 0:
            raise FormatError("no L2 table for L1 index %d" % l1_index)
        nbytes = len(entries) * L2_ENTRY_SIZE
        self.pwrite(np.ascontiguousarray(entries, dtype="<u8").tobytes(), off + slice_no * nbytes)

    def read_entry(self, l1_index, l2_index):
        off = int(self.l1[l1_index])
        if off == 0:
            return 0
        return int.from_bytes(self.pread(8, off + 8 * l2_index), "little")

    def write_entry(self, l1_index, l2_index, raw):
        off = int(self.l1[l1_index])
        if off == 0:
            raise FormatError("no L2 table for L1 index %d" % l1_index)
        self.pwrite(int(raw).to_bytes(8, "little"), off + 8 * l2_index)

    # -- data --------------------------------------------------------------

    def alloc_cluster(self):
        self._check_writable()
        off = self.end
        self.end += self.cluster_size
        return off

    def read_data(self, host_offset, size):
        return self.pread(size, host_offset)

    def write_data(self, host_offset, data):
        return self.pwrite(data, host_offset)

    def allocated_tables(self):
        return [i for i in range(len(self.l1)) if self.l1[i]]
