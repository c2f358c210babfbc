"""
Value types of the PIO B-tree.

A PIO leaf is an extent of L consecutive pages, the leaf segments (LS). Each LS page
uses the common 16-byte node header (type 3, flags = segment index, entry count,
next leaf id in LS 0 only) followed by 17-byte entries::

    u64 key, u64 data_ptr, u8 op (1 insert, 2 delete, 3 update)

Entries are appended in arrival order, so reading the segments in index order gives
the chronological history of the leaf.
"""
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple

from piobtree.btree.models import HEADER, HEADER_SIZE, NIL_PAGE, NODE_LEAF_SEGMENT
from piobtree.exceptions import ConfigError, CorruptPageError

# Data pointer carried by a delete that matches any pointer of its key.
WILDCARD_PTR = NIL_PAGE

SEGMENT_ENTRY = struct.Struct('<QQB')
SEGMENT_ENTRY_SIZE = SEGMENT_ENTRY.size


class OpFlag(str, Enum):
    INSERT = 'i'
    DELETE = 'd'
    UPDATE = 'u'


_OP_CODES = {OpFlag.INSERT: 1, OpFlag.DELETE: 2, OpFlag.UPDATE: 3}
_OP_FLAGS = {code: flag for flag, code in _OP_CODES.items()}


class OpqEntry(NamedTuple):
    """An index record tagged with the update operation that produced it."""
    key: int
    data_ptr: int
    op: OpFlag

    @classmethod
    def insert(cls, key: int, data_ptr: int) -> 'OpqEntry':
        return cls(key, data_ptr, OpFlag.INSERT)

    @classmethod
    def delete(cls, key: int, data_ptr: Optional[int] = None) -> 'OpqEntry':
        return cls(key, WILDCARD_PTR if data_ptr is None else data_ptr, OpFlag.DELETE)

    @classmethod
    def update(cls, key: int, data_ptr: int) -> 'OpqEntry':
        return cls(key, data_ptr, OpFlag.UPDATE)


@dataclass
class FenceKeyRecord:
    """Separator change reported to a parent: i after a split, u after redistribution,
    d after a merge."""
    key: int
    ptr: int
    op: OpFlag


@dataclass
class PioConfig:
    """Tuning knobs of the PIO B-tree."""
    pio_max: int = 64
    speriod: int = 5000
    bcnt: int = 5000
    leaf_segments: int = 1
    opq_pages: int = 1
    flush_mode: str = 'full'
    ls_capacity: int = 0

    def __post_init__(self):
        for name in ('pio_max', 'speriod', 'bcnt', 'leaf_segments', 'opq_pages'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be >= 1')
        if self.flush_mode not in ('full', 'partial'):
            raise ConfigError(f"flush_mode must be 'full' or 'partial', got {self.flush_mode!r}")
        if self.ls_capacity < 0:
            raise ConfigError('ls_capacity must be >= 0')


@dataclass(frozen=True)
class PioGeometry:
    """Internal-node fanout plus leaf-segment capacities."""
    page_size: int
    fanout: int
    leaf_segments: int
    ls_capacity: int

    @classmethod
    def derive(cls, page_size: int, fanout: int, leaf_segments: int, ls_capacity: int = 0) -> 'PioGeometry':
        max_ls = (page_size - HEADER_SIZE) // SEGMENT_ENTRY_SIZE
        capacity = ls_capacity or max_ls
        if capacity < 1 or capacity > max_ls:
            raise ConfigError(f'leaf segment capacity {capacity} outside [1, {max_ls}]')
        if leaf_segments * capacity < 2:
            raise ConfigError('a leaf must hold at least two entries')
        return cls(page_size, fanout, leaf_segments, capacity)

    @property
    def leaf_capacity(self) -> int:
        return self.leaf_segments * self.ls_capacity

    @property
    def min_leaf(self) -> int:
        return self.leaf_capacity // 2

    @property
    def min_children(self) -> int:
        return (self.fanout + 1) // 2

    @property
    def leaf_bytes(self) -> int:
        return self.leaf_segments * self.page_size


@dataclass
class LeafSegment:
    index: int
    entries: List[OpqEntry] = field(default_factory=list)
    next_leaf: int = NIL_PAGE


def encode_segment(segment: LeafSegment, page_size: int) -> bytes:
    buf = bytearray(page_size)
    HEADER.pack_into(buf, 0, NODE_LEAF_SEGMENT, segment.index, len(segment.entries), 0,
                     segment.next_leaf)
    offset = HEADER_SIZE
    for entry in segment.entries:
        SEGMENT_ENTRY.pack_into(buf, offset, entry.key, entry.data_ptr, _OP_CODES[entry.op])
        offset += SEGMENT_ENTRY_SIZE
    return bytes(buf)


def decode_segment(page_id: int, data: bytes) -> LeafSegment:
    kind, index, count, _reserved, next_leaf = HEADER.unpack_from(data, 0)
    if kind != NODE_LEAF_SEGMENT:
        raise CorruptPageError(f'page {page_id}: expected a leaf segment, found type {kind}')
    entries = []
    for i in range(count):
        key, ptr, code = SEGMENT_ENTRY.unpack_from(data, HEADER_SIZE + i * SEGMENT_ENTRY_SIZE)
        if code not in _OP_FLAGS:
            raise CorruptPageError(f'page {page_id}: bad op code {code}')
        entries.append(OpqEntry(key, ptr, _OP_FLAGS[code]))
    return LeafSegment(index, entries, next_leaf)


@dataclass
class PioLeafNode:
    """A leaf of L segments; only the last non-empty segment receives appends."""
    page_id: int
    segments: List[List[OpqEntry]]
    next_leaf: int = NIL_PAGE

    @property
    def entries(self) -> List[OpqEntry]:
        return [e for segment in self.segments for e in segment]

    @property
    def last_segment(self) -> int:
        for index in range(len(self.segments) - 1, -1, -1):
            if self.segments[index]:
                return index
        return 0

    @classmethod
    def compacted(cls, page_id: int, records: List[Tuple[int, int]], geometry: PioGeometry,
                  next_leaf: int = NIL_PAGE) -> 'PioLeafNode':
        """A leaf holding ``records`` as insert entries packed from segment 0."""
        cap = geometry.ls_capacity
        segments = [[] for _ in range(geometry.leaf_segments)]
        for i, (key, ptr) in enumerate(records):
            segments[i // cap].append(OpqEntry.insert(key, ptr))
        return cls(page_id, segments, next_leaf)

    def encode(self, page_size: int) -> bytes:
        return b''.join(
            encode_segment(LeafSegment(i, seg, self.next_leaf if i == 0 else NIL_PAGE), page_size)
            for i, seg in enumerate(self.segments))

    @classmethod
    def decode(cls, page_id: int, data: bytes, page_size: int) -> 'PioLeafNode':
        segments = []
        next_leaf = NIL_PAGE
        for i in range(len(data) // page_size):
            segment = decode_segment(page_id + i, data[i * page_size:(i + 1) * page_size])
            if i == 0:
                next_leaf = segment.next_leaf
            segments.append(segment.entries)
        return cls(page_id, segments, next_leaf)


@dataclass
class ChildOutcome:
    """What one node reports to its parent after a batch update."""
    fences: List[FenceKeyRecord] = field(default_factory=list)
    underflow: bool = False
    records: List[Tuple[int, int]] = field(default_factory=list)
    next_leaf: int = NIL_PAGE


@dataclass
class FlushStats:
    """Counters of one bupdate call."""
    entries_processed: int = 0
    key_range: Optional[Tuple[int, int]] = None
    nodes_read_by_level: Dict[int, int] = field(default_factory=dict)
    leaves_appended: int = 0
    leaves_shrunk: int = 0
    leaves_split: int = 0
    leaves_merged: int = 0
    leaves_redistributed: int = 0
    internal_splits: int = 0
    height_change: int = 0

    def g_measured(self, level: int) -> float:
        """Entries processed per distinct node touched at ``level`` (0 is the root)."""
        nodes = self.nodes_read_by_level.get(level, 0)
        return self.entries_processed / nodes if nodes else 0.0


class PioListener:
    """Hooks around OPQ appends and flush writes; the defaults do nothing."""

    def on_append(self, entry: OpqEntry, txn: int) -> None:
        pass

    def on_flush_start(self, key_range: Tuple[int, int], entries: List[OpqEntry]) -> None:
        pass

    def before_write(self, pages: List[int]) -> None:
        pass

    def after_write(self, pages: List[int]) -> None:
        pass

    def on_flush_end(self, key_range: Tuple[int, int]) -> None:
        pass
