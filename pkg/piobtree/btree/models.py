"""
Node and superblock page formats shared by the baseline B+-tree and the PIO B-tree.

All integers are little-endian. Every node page starts with a 16-byte header::

    offset 0   u8   node type (1 internal, 2 leaf, 3 leaf segment)
    offset 1   u8   flags (leaf segment: segment index within its leaf)
    offset 2   u16  entry count
    offset 4   u32  reserved
    offset 8   u64  next leaf page id (NIL_PAGE when none)

followed by the packed body:

    internal      u64 child0, then count x (u64 key, u64 child)
    leaf          count x (u64 key, u64 data_ptr)
    leaf segment  count x (u64 key, u64 data_ptr, u8 op)

The superblock lives at page 0; see ``Superblock``.
"""
import bisect
import struct
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple, Union

from piobtree.exceptions import ConfigError, CorruptPageError

KEY_WIDTH = 8
PTR_WIDTH = 8
KEY_MIN = 0
KEY_MAX = 2 ** 64 - 1
NIL_PAGE = 2 ** 64 - 1
SUPERBLOCK_PAGE = 0

NODE_INTERNAL = 1
NODE_LEAF = 2
NODE_LEAF_SEGMENT = 3

HEADER = struct.Struct('<BBHIQ')
HEADER_SIZE = HEADER.size
RECORD_SIZE = KEY_WIDTH + PTR_WIDTH
INTERNAL_ENTRY_SIZE = KEY_WIDTH + PTR_WIDTH


class IndexRecord(NamedTuple):
    key: int
    data_ptr: int


@dataclass
class InternalNode:
    """Keys K1..Kk ascending over children P1..Pk+1; child i holds [K(i-1), K(i))."""
    page_id: int
    keys: List[int] = field(default_factory=list)
    children: List[int] = field(default_factory=list)

    def child_index(self, key: int) -> int:
        return bisect.bisect_right(self.keys, key)

    def child_bounds(self, index: int) -> Tuple[Optional[int], Optional[int]]:
        """Key interval [low, high) of a child; None stands for an open end."""
        low = self.keys[index - 1] if index > 0 else None
        high = self.keys[index] if index < len(self.keys) else None
        return low, high


@dataclass
class LeafNode:
    """Sorted baseline leaf stored as parallel key/pointer lists."""
    page_id: int
    keys: List[int] = field(default_factory=list)
    ptrs: List[int] = field(default_factory=list)
    next_leaf: int = NIL_PAGE

    @property
    def records(self) -> List[IndexRecord]:
        return [IndexRecord(k, p) for k, p in zip(self.keys, self.ptrs)]

    def __len__(self) -> int:
        return len(self.keys)


Node = Union[InternalNode, LeafNode]


@dataclass(frozen=True)
class TreeGeometry:
    """Node sizes and capacities derived from the page size."""
    page_size: int = 4096
    node_pages: int = 1
    fanout: int = 0
    leaf_capacity: int = 0

    def __post_init__(self):
        node_bytes = self.page_size * self.node_pages
        max_fanout = (node_bytes - HEADER_SIZE - PTR_WIDTH) // INTERNAL_ENTRY_SIZE + 1
        max_leaf = (node_bytes - HEADER_SIZE) // RECORD_SIZE
        fanout = self.fanout or max_fanout
        leaf_capacity = self.leaf_capacity or max_leaf
        if fanout < 3 or fanout > max_fanout:
            raise ConfigError(f'fanout {fanout} outside [3, {max_fanout}]')
        if leaf_capacity < 2 or leaf_capacity > max_leaf:
            raise ConfigError(f'leaf capacity {leaf_capacity} outside [2, {max_leaf}]')
        object.__setattr__(self, 'fanout', fanout)
        object.__setattr__(self, 'leaf_capacity', leaf_capacity)

    @property
    def node_bytes(self) -> int:
        return self.page_size * self.node_pages

    @property
    def min_children(self) -> int:
        return (self.fanout + 1) // 2

    @property
    def min_leaf(self) -> int:
        return self.leaf_capacity // 2


def node_type(data: bytes) -> int:
    return data[0]


def encode_internal(node: InternalNode, size: int) -> bytes:
    count = len(node.keys)
    if len(node.children) != count + 1:
        raise CorruptPageError(f'internal node {node.page_id}: {count} keys, {len(node.children)} children')
    buf = bytearray(size)
    HEADER.pack_into(buf, 0, NODE_INTERNAL, 0, count, 0, NIL_PAGE)
    flat = [node.children[0]]
    for key, child in zip(node.keys, node.children[1:]):
        flat.append(key)
        flat.append(child)
    struct.pack_into(f'<{len(flat)}Q', buf, HEADER_SIZE, *flat)
    return bytes(buf)


def encode_leaf(node: LeafNode, size: int) -> bytes:
    count = len(node.keys)
    buf = bytearray(size)
    HEADER.pack_into(buf, 0, NODE_LEAF, 0, count, 0, node.next_leaf)
    flat = [v for pair in zip(node.keys, node.ptrs) for v in pair]
    if flat:
        struct.pack_into(f'<{len(flat)}Q', buf, HEADER_SIZE, *flat)
    return bytes(buf)


def decode_node(page_id: int, data: bytes) -> Node:
    kind, _flags, count, _reserved, next_leaf = HEADER.unpack_from(data, 0)
    if kind == NODE_INTERNAL:
        flat = struct.unpack_from(f'<{2 * count + 1}Q', data, HEADER_SIZE)
        return InternalNode(page_id, list(flat[1::2]), [flat[0]] + list(flat[2::2]))
    if kind == NODE_LEAF:
        flat = struct.unpack_from(f'<{2 * count}Q', data, HEADER_SIZE)
        return LeafNode(page_id, list(flat[0::2]), list(flat[1::2]), next_leaf)
    raise CorruptPageError(f'page {page_id}: unexpected node type {kind}')


SUPERBLOCK_MAGIC = b'PIOBTREE'
SUPERBLOCK_FORMAT = struct.Struct('<8s8IQI5IQ2I')
KIND_BASELINE = 1
KIND_PIO = 2


@dataclass
class Superblock:
    """Tree metadata at page 0."""
    kind: int
    page_size: int
    node_pages: int
    fanout: int
    leaf_capacity: int
    root: int
    height: int
    leaf_segments: int = 1
    opq_pages: int = 0
    pio_max: int = 0
    speriod: int = 0
    bcnt: int = 0
    lsmap_start: int = NIL_PAGE
    lsmap_pages: int = 0
    lsmap_valid: int = 0
    version: int = 1

    def to_bytes(self) -> bytes:
        buf = bytearray(self.page_size)
        SUPERBLOCK_FORMAT.pack_into(
            buf, 0, SUPERBLOCK_MAGIC, self.version, self.kind, self.page_size, self.node_pages,
            self.fanout, self.leaf_capacity, KEY_WIDTH, PTR_WIDTH, self.root, self.height,
            self.leaf_segments, self.opq_pages, self.pio_max, self.speriod, self.bcnt,
            self.lsmap_start, self.lsmap_pages, self.lsmap_valid,
        )
        return bytes(buf)

    @classmethod
    def from_bytes(cls, data: bytes) -> 'Superblock':
        (magic, version, kind, page_size, node_pages, fanout, leaf_capacity, key_width,
         ptr_width, root, height, leaf_segments, opq_pages, pio_max, speriod, bcnt,
         lsmap_start, lsmap_pages, lsmap_valid) = SUPERBLOCK_FORMAT.unpack_from(data, 0)
        if magic != SUPERBLOCK_MAGIC:
            raise CorruptPageError('superblock magic mismatch')
        if key_width != KEY_WIDTH or ptr_width != PTR_WIDTH:
            raise CorruptPageError(f'unsupported record widths {key_width}/{ptr_width}')
        return cls(kind=kind, page_size=page_size, node_pages=node_pages, fanout=fanout,
                   leaf_capacity=leaf_capacity, root=root, height=height,
                   leaf_segments=leaf_segments, opq_pages=opq_pages, pio_max=pio_max,
                   speriod=speriod, bcnt=bcnt, lsmap_start=lsmap_start,
                   lsmap_pages=lsmap_pages, lsmap_valid=lsmap_valid, version=version)


def pack_counts(total: int, per_node: int, min_fill: int, capacity: int) -> List[int]:
    """
    Split ``total`` items into node-sized chunks of ``per_node`` items, keeping every
    chunk within [min_fill, capacity] when more than one chunk is produced.
    """
    if total <= 0:
        return []
    per_node = max(1, min(per_node, capacity))
    chunks = [per_node] * (total // per_node)
    rest = total % per_node
    if rest:
        chunks.append(rest)
    if len(chunks) > 1 and chunks[-1] < min_fill:
        combined = chunks[-1] + chunks[-2]
        if combined // 2 >= min_fill:
            chunks[-2:] = [combined - combined // 2, combined // 2]
        else:
            chunks[-2:] = [combined]
    return chunks


def even_split(total: int, parts: int) -> List[int]:
    """Sizes of ``parts`` near-equal chunks summing to ``total``."""
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]
