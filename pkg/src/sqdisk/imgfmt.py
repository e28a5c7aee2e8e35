"""On-disk layout of a single image layer.

Layout (all integers little-endian)::

    cluster 0        header, zero padded
    cluster 1..      L1 table, contiguous, 8-byte file offsets (0 = no L2 table)
    after that       L2 tables and data clusters, bump allocated

An L2 entry is 64 bits: the host offset of the data cluster in bits 0..47
and, in bits 48..63, the chain index of the owning layer plus one. Zero in
the upper bits means "no index stored", which is what a plain image writes.
"""
import struct
from dataclasses import dataclass
from typing import NamedTuple

MAGIC = b"SQD1"
VERSION = 1
MIN_CLUSTER_BITS = 9
MAX_CLUSTER_BITS = 21
DEFAULT_CLUSTER_BITS = 16
L2_ENTRY_SIZE = 8
L1_ENTRY_SIZE = 8

FLAG_BACKING_INDEX = 1 << 0
KNOWN_FLAGS = FLAG_BACKING_INDEX

OFFSET_BITS = 48
OFFSET_MASK = (1 << OFFSET_BITS) - 1
INDEX_MASK = 0xFFFF
MAX_CHAIN_LENGTH = INDEX_MASK

_HEADER = struct.Struct("<4sIIQQIIHH")


class FormatError(ValueError):
    """Raised for malformed or unsupported image data."""


class AddressError(FormatError):
    """Raised for a guest offset outside the virtual disk."""


@dataclass(frozen=True)
class ImageHeader:
    disk_size: int
    cluster_bits: int = DEFAULT_CLUSTER_BITS
    flags: int = 0
    chain_index: int = 0
    backing_ref: str = ""
    l1_entries: int = -1
    l1_offset: int = -1
    version: int = VERSION
    magic: bytes = MAGIC

    def __post_init__(self):
        if self.l1_entries < 0:
            object.__setattr__(self, "l1_entries", l1_entries_for(self.disk_size, self.cluster_bits))
        if self.l1_offset < 0:
            object.__setattr__(self, "l1_offset", 1 << self.cluster_bits)

    @property
    def cluster_size(self):
        return 1 << self.cluster_bits

    @property
    def l2_entries(self):
        return 1 << (self.cluster_bits - 3)

    @property
    def backing_index(self):
        return bool(self.flags & FLAG_BACKING_INDEX)

    @property
    def is_base(self):
        return not self.backing_ref

    @property
    def l1_clusters(self):
        return l1_clusters_for(self.l1_entries, self.cluster_bits)

    @property
    def empty_size(self):
        return empty_volume_size(self.disk_size, self.cluster_bits)

    def validate(self):
        if self.magic != MAGIC:
            raise FormatError("bad magic")
        if self.version != VERSION:
            raise FormatError("unsupported version %d" % self.version)
        if not MIN_CLUSTER_BITS <= self.cluster_bits <= MAX_CLUSTER_BITS:
            raise FormatError("cluster_bits %d out of range" % self.cluster_bits)
        if self.disk_size <= 0:
            raise FormatError("disk_size must be positive")
        if self.l1_entries != l1_entries_for(self.disk_size, self.cluster_bits):
            raise FormatError("l1_entries does not match disk geometry")
        if self.l1_offset != self.cluster_size:
            raise FormatError("L1 table must start at cluster 1")
        if self.flags & ~KNOWN_FLAGS:
            raise FormatError("unknown feature flags 0x%x" % self.flags)
        if not 0 <= self.chain_index < MAX_CHAIN_LENGTH:
            raise FormatError("chain_index out of range")
        if self.is_base != (self.chain_index == 0):
            raise FormatError("only the base layer (chain_index 0) may lack a backing reference")


def l1_entries_for(disk_size, cluster_bits):
    """Number of L1 entries; each one covers an L2 table of 2^(c-3) clusters."""
    return -(-disk_size // (1 << (2 * cluster_bits - 3)))


def l1_clusters_for(l1_entries, cluster_bits):
    return max(1, -(-(l1_entries * L1_ENTRY_SIZE) // (1 << cluster_bits)))


def empty_volume_size(disk_size, cluster_bits):
    """Bytes in a freshly created layer: header cluster plus the L1 region."""
    n = l1_clusters_for(l1_entries_for(disk_size, cluster_bits), cluster_bits)
    return (1 + n) << cluster_bits


def encode_header(h):
    h.validate()
    ref = h.backing_ref.encode("utf-8")
    if _HEADER.size + len(ref) > h.cluster_size:
        raise FormatError("backing reference does not fit in the header cluster")
    head = _HEADER.pack(h.magic, h.version, h.cluster_bits, h.disk_size, h.l1_offset,
                        h.l1_entries, h.flags, h.chain_index, len(ref))
    return (head + ref).ljust(h.cluster_size, b"\0")


def decode_header(data):
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, cbits, disk_size, l1_off, l1_n, flags, index, ref_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("bad magic")
    if version != VERSION:
        raise FormatError("unsupported version %d" % version)
    if not MIN_CLUSTER_BITS <= cbits <= MAX_CLUSTER_BITS:
        raise FormatError("cluster_bits %d out of range" % cbits)
    if len(data) < (1 << cbits):
        raise FormatError("truncated header")
    if _HEADER.size + ref_len > (1 << cbits):
        raise FormatError("backing reference overruns the header cluster")
    try:
        ref = bytes(data[_HEADER.size:_HEADER.size + ref_len]).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("backing reference is not UTF-8") from None
    h = ImageHeader(disk_size=disk_size, cluster_bits=cbits, flags=flags, chain_index=index,
                    backing_ref=ref, l1_entries=l1_n, l1_offset=l1_off, version=version, magic=magic)
    h.validate()
    return h


def peek_cluster_bits(data):
    """Cluster bits from the fixed header prefix, after checking magic and version."""
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, cbits = struct.unpack_from("<4sII", data)
    if magic != MAGIC:
        raise FormatError("bad magic")
    if version != VERSION:
        raise FormatError("unsupported version %d" % version)
    if not MIN_CLUSTER_BITS <= cbits <= MAX_CLUSTER_BITS:
        raise FormatError("cluster_bits %d out of range" % cbits)
    return cbits


HEADER_PREFIX_SIZE = _HEADER.size


class AddrCoords(NamedTuple):
    l1_index: int
    l2_index: int
    slice_no: int
    l2_slice_index: int
    intra_cluster_offset: int


def translate(vb, cluster_bits, slice_entries, disk_size=None):
    """Split guest byte offset ``vb`` into table coordinates."""
    if vb < 0 or (disk_size is not None and vb >= disk_size):
        raise AddressError("guest offset %d outside disk" % vb)
    l2_bits = cluster_bits - 3
    cluster = vb >> cluster_bits
    l2_index = cluster & ((1 << l2_bits) - 1)
    return AddrCoords(cluster >> l2_bits, l2_index, l2_index // slice_entries,
                      l2_index % slice_entries, vb & ((1 << cluster_bits) - 1))


def check_slice_entries(slice_entries, cluster_bits):
    per_table = 1 << (cluster_bits - 3)
    if slice_entries <= 0 or slice_entries & (slice_entries - 1) or per_table % slice_entries:
        raise FormatError("slice size %d must be a power of two dividing %d" % (slice_entries, per_table))


def pack_entry(host_offset, bindex_plus1=0, cluster_bits=None):
    if host_offset < 0 or host_offset > OFFSET_MASK:
        raise FormatError("host offset 0x%x does not fit in 48 bits" % host_offset)
    if cluster_bits is not None and host_offset & ((1 << cluster_bits) - 1):
        raise FormatError("host offset 0x%x is not cluster aligned" % host_offset)
    if not 0 <= bindex_plus1 <= INDEX_MASK:
        raise FormatError("backing index %d does not fit in 16 bits" % bindex_plus1)
    return host_offset | (bindex_plus1 << OFFSET_BITS)


def unpack_entry(raw):
    return raw & OFFSET_MASK, (raw >> OFFSET_BITS) & INDEX_MASK


def strip_index(raw):
    return raw & OFFSET_MASK


def entry_owner(raw, layer_index):
    """Chain index holding the data for ``raw`` found in layer ``layer_index``.

    Returns None for an unallocated entry. An entry without stored index
    belongs to the layer it was read from.
    """
    if raw == 0:
        return None
    idx = raw >> OFFSET_BITS
    return layer_index if idx == 0 else idx - 1


def clusters_in(disk_size, cluster_bits):
    return -(-disk_size // (1 << cluster_bits))
