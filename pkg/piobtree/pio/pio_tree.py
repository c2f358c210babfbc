import bisect
import logging
import math
import struct
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Set, Tuple

from piobtree.btree.bplus_tree import (
    build_levels, check_sibling_chain, check_sorted_within, claim_superblock, load_superblock,
    prefetch_levels, split_sorted_records, store_superblock, write_in_batches,
)
from piobtree.btree.buffer_pool import BufferPool
from piobtree.btree.models import (
    KEY_MAX, KEY_MIN, KIND_PIO, NIL_PAGE, SUPERBLOCK_PAGE, IndexRecord, InternalNode, Superblock,
    TreeGeometry, decode_node, encode_internal, even_split,
)
from piobtree.device.base import BlockDevice
from piobtree.device.models import PageId
from piobtree.exceptions import CorruptPageError, TreeError
from piobtree.pio.leaf import fold, leaf_lookup, merged_records, shrink
from piobtree.pio.lsmap import LsMap
from piobtree.pio.models import (
    ChildOutcome, FenceKeyRecord, FlushStats, LeafSegment, OpFlag, OpqEntry, PioConfig,
    PioGeometry, PioLeafNode, PioListener, decode_segment, encode_segment,
)
from piobtree.pio.opq import AUTOCOMMIT, OpQueue

logger = logging.getLogger(__name__)

LSMAP_HEADER = struct.Struct('<Q')

Records = List[Tuple[int, int]]
PageWrites = List[Tuple[PageId, bytes]]


def check_search_needed(i: int, keys: Sequence[int], search_keys: Sequence[int]) -> bool:
    """
    True iff some search key s satisfies K(i-1) <= s < K(i) for the 1-based child
    position ``i``, with K(0) = -inf and K(F) = +inf.
    """
    low = keys[i - 2] if i >= 2 else None
    high = keys[i - 1] if i <= len(keys) else None
    j = bisect.bisect_left(search_keys, low) if low is not None else 0
    return j < len(search_keys) and (high is None or search_keys[j] < high)


def range_overlaps(bounds: Tuple[Optional[int], Optional[int]], start: int, end: int) -> bool:
    low, high = bounds
    return (low is None or low < end) and (high is None or high > start)


def route_entries(node: InternalNode, entries: List[OpqEntry]) -> List[Tuple[int, List[OpqEntry]]]:
    """Split key-sorted entries into runs per child index."""
    parts: List[Tuple[int, List[OpqEntry]]] = []
    for entry in entries:
        idx = node.child_index(entry.key)
        if parts and parts[-1][0] == idx:
            parts[-1][1].append(entry)
        else:
            parts.append((idx, [entry]))
    return parts


class PioBTree:
    """
    B+-tree variant that batches index I/O: updates wait in an in-memory Operation
    Queue, searches and flushes descend level by level issuing one psync batch of up to
    PioMax node reads per step, and leaves are append-only extents of L segments.

    The buffer pool holds internal nodes only and is written through; leaves always
    come from the device.
    """

    def __init__(self, device: BlockDevice, geometry: PioGeometry, config: PioConfig,
                 buffer_pages: int = 0, root: PageId = NIL_PAGE, height: int = 0):
        self.device = device
        self.geometry = geometry
        self.config = config
        self.pool = BufferPool(device, buffer_pages, 1, write_back=False)
        self.lsmap = LsMap(geometry.leaf_segments)
        capacity = config.opq_pages * (geometry.fanout - 1)
        self.opq = OpQueue(capacity, config.speriod)
        self.bcnt = min(config.bcnt, capacity)
        if self.bcnt < config.bcnt:
            logger.debug(f'bcnt {config.bcnt} capped at OPQ capacity {capacity}')
        self.listener = PioListener()
        self.root = root
        self.height = height
        self.last_flush: Optional[FlushStats] = None
        self._stats = FlushStats()
        self._pending_free: List[Tuple[PageId, int]] = []
        self._root_fanout: Optional[int] = None
        # per-flush views of rebuilt leaves and of underfull only-children awaiting a sibling
        self._leaf_views: Dict[PageId, Tuple[Records, PageId]] = {}
        self._unresolved: Set[PageId] = set()
        self._lsmap_extent: Optional[Tuple[PageId, int]] = None
        self._lsmap_on_disk = False

    # Lifecycle

    @classmethod
    def create(cls, device: BlockDevice, config: Optional[PioConfig] = None, fanout: int = 0,
               buffer_pages: int = 0) -> 'PioBTree':
        """Create an empty tree (a single empty root leaf) on a fresh device."""
        config = config or PioConfig()
        page_size = device.config.page_size
        fanout = TreeGeometry(page_size, 1, fanout).fanout
        geometry = PioGeometry.derive(page_size, fanout, config.leaf_segments, config.ls_capacity)
        claim_superblock(device)
        tree = cls(device, geometry, config, buffer_pages)
        root = device.alloc_extent(geometry.leaf_segments)
        tree._write_leaf_images([(root, tree._leaf_image(root, [], NIL_PAGE))])
        tree.root, tree.height = root, 1
        tree._store_superblock()
        logger.info(f'created PIO B-tree: F={fanout}, L={geometry.leaf_segments}, '
                    f'LS capacity={geometry.ls_capacity}, O={config.opq_pages}, '
                    f'PioMax={config.pio_max}, bcnt={tree.bcnt}')
        return tree

    @classmethod
    def open(cls, device: BlockDevice, buffer_pages: int = 0, flush_mode: str = 'full') -> 'PioBTree':
        """Reopen a persisted tree; the LSMap is rebuilt from the leaves when absent."""
        sb = load_superblock(device)
        if sb.kind != KIND_PIO:
            raise TreeError(f'superblock kind {sb.kind} is not a PIO B-tree')
        config = PioConfig(pio_max=sb.pio_max, speriod=sb.speriod, bcnt=sb.bcnt,
                           leaf_segments=sb.leaf_segments, opq_pages=sb.opq_pages,
                           flush_mode=flush_mode, ls_capacity=sb.leaf_capacity)
        geometry = PioGeometry.derive(sb.page_size, sb.fanout, sb.leaf_segments, sb.leaf_capacity)
        tree = cls(device, geometry, config, buffer_pages, sb.root, sb.height)

        internals, leaves = tree._scan_structure()
        loaded = False
        if sb.lsmap_valid:
            data = b''.join(device.snapshot_pages(range(sb.lsmap_start, sb.lsmap_start + sb.lsmap_pages)))
            (count,) = LSMAP_HEADER.unpack_from(data, 0)
            if count == len(leaves):
                tree.lsmap.decode(leaves, data[LSMAP_HEADER.size:])
                loaded = True
        if not loaded:
            logger.warning(f'LSMap absent or stale; rebuilding from {len(leaves)} leaves')
            for pid in leaves:
                tree.lsmap.set(pid, tree.lsmap.clamp(tree._peek_leaf(pid).last_segment))

        pages: Set[PageId] = {SUPERBLOCK_PAGE}
        pages.update(internals)
        for pid in leaves:
            pages.update(range(pid, pid + geometry.leaf_segments))
        device.reset_allocation(pages)
        tree._store_superblock()
        logger.info(f'opened PIO B-tree: root={tree.root}, height={tree.height}, leaves={len(leaves)}')
        return tree

    def close(self) -> None:
        """Flush the OPQ and persist the LSMap alongside the superblock."""
        flushes = self.force_flush()
        if flushes:
            logger.info(f'closing: {len(flushes)} flushes, '
                        f'{sum(f.entries_processed for f in flushes)} entries')
        if self._lsmap_extent:
            self.device.free_extent(*self._lsmap_extent)
        _, leaves = self._scan_structure()
        data = LSMAP_HEADER.pack(len(leaves)) + self.lsmap.encode(leaves)
        ps = self.geometry.page_size
        count = math.ceil(len(data) / ps)
        data = data.ljust(count * ps, b'\0')
        start = self.device.alloc_extent(count)
        write_in_batches(self.device, [(start + i, data[i * ps:(i + 1) * ps]) for i in range(count)], 1)
        self._lsmap_extent = (start, count)
        self._store_superblock(lsmap_valid=True)
        self._lsmap_on_disk = True

    def superblock(self, lsmap_valid: bool = False) -> Superblock:
        g, c = self.geometry, self.config
        start, pages = self._lsmap_extent if lsmap_valid and self._lsmap_extent else (NIL_PAGE, 0)
        return Superblock(kind=KIND_PIO, page_size=g.page_size, node_pages=1, fanout=g.fanout,
                          leaf_capacity=g.ls_capacity, root=self.root, height=self.height,
                          leaf_segments=g.leaf_segments, opq_pages=c.opq_pages, pio_max=c.pio_max,
                          speriod=c.speriod, bcnt=c.bcnt, lsmap_start=start, lsmap_pages=pages,
                          lsmap_valid=1 if lsmap_valid else 0)

    def _store_superblock(self, lsmap_valid: bool = False) -> None:
        store_superblock(self.device, self.superblock(lsmap_valid))

    def _rewrite_superblock(self) -> None:
        self.listener.before_write([SUPERBLOCK_PAGE])
        self._store_superblock()
        self.listener.after_write([SUPERBLOCK_PAGE])

    # Node access

    def _read_internal_many(self, pids: Sequence[PageId]) -> List[InternalNode]:
        nodes = [decode_node(p, d) for p, d in zip(pids, self.pool.get_many(pids))]
        for node in nodes:
            if not isinstance(node, InternalNode):
                raise CorruptPageError(f'page {node.page_id}: expected an internal node')
        return nodes

    def _read_leaves(self, pids: Sequence[PageId]) -> List[PioLeafNode]:
        """Whole-leaf reads: one psync batch of L-page requests."""
        ps = self.geometry.page_size
        buffers = self.device.psync_read(pids, self.geometry.leaf_segments)
        return [PioLeafNode.decode(p, d, ps) for p, d in zip(pids, buffers)]

    def _peek_leaf(self, pid: PageId) -> PioLeafNode:
        pages = range(pid, pid + self.geometry.leaf_segments)
        return PioLeafNode.decode(pid, b''.join(self.device.snapshot_pages(pages)), self.geometry.page_size)

    def _leaf_image(self, pid: PageId, records: Records, next_leaf: PageId) -> bytes:
        leaf = PioLeafNode.compacted(pid, records, self.geometry, next_leaf)
        self.lsmap.set(pid, self.lsmap.clamp(leaf.last_segment))
        return leaf.encode(self.geometry.page_size)

    def _write_leaf_images(self, images: PageWrites) -> None:
        write_in_batches(self.device, images, self.geometry.leaf_segments)

    def _emit_leaf(self, writes: Dict[PageId, bytes], pid: PageId, records: Records,
                   next_leaf: PageId) -> None:
        image = self._leaf_image(pid, records, next_leaf)
        self._leaf_views[pid] = (records, next_leaf)
        ps = self.geometry.page_size
        for i in range(self.geometry.leaf_segments):
            writes[pid + i] = image[i * ps:(i + 1) * ps]

    def _write_pages(self, writes: PageWrites) -> None:
        """Flush-time page writes in psync batches of at most PioMax pages."""
        step = self.config.pio_max
        for i in range(0, len(writes), step):
            chunk = writes[i:i + step]
            pages = [p for p, _ in chunk]
            self.listener.before_write(pages)
            self.device.psync_write(chunk)
            self.listener.after_write(pages)
            for page, data in chunk:
                self.pool.refresh(page, data)

    def _defer_free(self, pid: PageId, count: int) -> None:
        self._pending_free.append((pid, count))

    # Search

    def _multipath(self, select: Callable[[InternalNode], List[int]]) -> Iterator[List[PageId]]:
        """Yield chunks of at most PioMax leaf ids, in key order, for the selected paths."""
        yield from self._walk([self.root], 1, select)

    def _walk(self, pids: List[PageId], depth: int,
              select: Callable[[InternalNode], List[int]]) -> Iterator[List[PageId]]:
        if depth == self.height:
            yield pids
            return
        children: List[PageId] = []
        seen: Set[PageId] = set()
        for node in self._read_internal_many(pids):
            for idx in select(node):
                child = node.children[idx]
                if child not in seen:
                    seen.add(child)
                    children.append(child)
        step = self.config.pio_max
        for i in range(0, len(children), step):
            yield from self._walk(children[i:i + step], depth + 1, select)

    def mpsearch(self, search_keys: Sequence[int]) -> List[PioLeafNode]:
        """
        Multi-path search: every leaf whose key range holds one of ``search_keys``.

        Each level's relevant child pointers are read in psync batches of at most
        PioMax nodes; when a level yields more pointers the chunks are descended one
        after another, depth first.
        """
        keys = sorted(set(search_keys))
        if not keys:
            return []

        def select(node: InternalNode) -> List[int]:
            return [i - 1 for i in range(1, len(node.children) + 1)
                    if check_search_needed(i, node.keys, keys)]

        leaves: List[PioLeafNode] = []
        for chunk in self._multipath(select):
            leaves.extend(self._read_leaves(chunk))
        return leaves

    def point_search(self, key: int) -> Optional[int]:
        """Data pointer of ``key`` after replaying queued operations over the leaf."""
        leaf = self.mpsearch([key])[0]
        return fold(leaf_lookup(leaf, key) + self.opq.search(key))

    def prange_search(self, start: int, end: int) -> List[IndexRecord]:
        """Records with start <= key < end; qualifying leaves are read in psync batches."""
        if start >= end:
            return []

        def select(node: InternalNode) -> List[int]:
            return [i for i in range(len(node.children))
                    if range_overlaps(node.child_bounds(i), start, end)]

        entries: List[OpqEntry] = []
        for chunk in self._multipath(select):
            for leaf in self._read_leaves(chunk):
                entries.extend(leaf.entries)
        return merged_records(entries, self.opq.range(start, end), start, end)

    def range_search_legacy(self, start: int, end: int) -> List[IndexRecord]:
        """Range search the baseline way: one descent, then the sibling chain leaf by leaf."""
        if start >= end:
            return []
        parent: Optional[InternalNode] = None
        idx, parent_high, high = 0, None, None
        page_id = self.root
        for _ in range(self.height - 1):
            node = self._read_internal_many([page_id])[0]
            i = node.child_index(start)
            parent, idx, parent_high = node, i, high
            high = node.keys[i] if i < len(node.keys) else high
            page_id = node.children[i]
        bound_known = True

        entries: List[OpqEntry] = []
        leaf = self._read_leaves([page_id])[0]
        while True:
            entries.extend(leaf.entries)
            if any(e.key >= end for e in leaf.entries):
                break
            if bound_known and high is not None and high >= end:
                break
            if leaf.next_leaf == NIL_PAGE:
                break
            leaf = self._read_leaves([leaf.next_leaf])[0]
            if parent is not None and bound_known and idx + 1 < len(parent.children):
                idx += 1
                high = parent.keys[idx] if idx < len(parent.keys) else parent_high
            else:
                bound_known = False
        return merged_records(entries, self.opq.range(start, end), start, end)

    def records(self) -> List[IndexRecord]:
        return self.prange_search(KEY_MIN, KEY_MAX)

    # Updates

    def pio_insert(self, key: int, data_ptr: int, txn: int = AUTOCOMMIT) -> None:
        self._enqueue(OpqEntry.insert(key, data_ptr), txn)

    def pio_delete(self, key: int, data_ptr: Optional[int] = None, txn: int = AUTOCOMMIT) -> None:
        self._enqueue(OpqEntry.delete(key, data_ptr), txn)

    def pio_update(self, key: int, data_ptr: int, txn: int = AUTOCOMMIT) -> None:
        self._enqueue(OpqEntry.update(key, data_ptr), txn)

    def _enqueue(self, entry: OpqEntry, txn: int) -> None:
        if self.opq.is_full:
            if self.config.flush_mode == 'full':
                self.force_flush()
            else:
                self.flush_partial()
            if self.opq.is_full:
                raise TreeError('operation queue is full of uncommitted entries')
        self.listener.on_append(entry, txn)
        self.opq.append(entry, txn)

    def commit_txn(self, txn: int) -> int:
        """Make the queued entries of ``txn`` eligible for flushing."""
        return self.opq.commit(txn)

    def abort_txn(self, txn: int) -> int:
        return self.opq.abort(txn)

    def flush_partial(self) -> Optional[FlushStats]:
        """Flush up to bcnt committed entries with the lowest keys."""
        slots = self.opq.take_lowest(self.bcnt)
        if not slots:
            return None
        entries = [slot.entry for slot in slots]
        key_range = (entries[0].key, entries[-1].key)
        self.listener.on_flush_start(key_range, entries)
        stats = self.bupdate(entries)
        self.listener.on_flush_end(key_range)
        self.opq.remove(slots)
        return stats

    def force_flush(self) -> List[FlushStats]:
        """Repeat partial flushes until no committed entry is left in the OPQ."""
        flushes = []
        while True:
            stats = self.flush_partial()
            if stats is None:
                return flushes
            flushes.append(stats)

    # Batch update

    def bupdate(self, entries: Sequence[OpqEntry]) -> FlushStats:
        """
        Apply a batch of tagged entries with MPSearch-style batched descent.

        Leaves receive appends in their last segment (one page read and written);
        leaves without room are read whole, shrunk, rewritten and split when needed.
        Separator changes travel upward as fence keys and every level's modified
        nodes are written in psync batches.
        """
        if not entries:
            return FlushStats()
        ordered = sorted(entries, key=lambda e: e.key)
        self._stats = FlushStats(entries_processed=len(ordered),
                                 key_range=(ordered[0].key, ordered[-1].key))
        self._root_fanout = None
        self._leaf_views.clear()
        self._unresolved.clear()
        old_root, old_height = self.root, self.height
        if self._lsmap_on_disk:
            # appends below would leave the persisted LSMap stale
            self._rewrite_superblock()
            self._lsmap_on_disk = False

        outcomes = self._update_level([self.root], [ordered], 1)
        self._settle_root(outcomes[self.root])
        if (self.root, self.height) != (old_root, old_height):
            self._rewrite_superblock()

        for pid, count in self._pending_free:
            self.pool.discard(pid)
            self.device.free_extent(pid, count)
        self._pending_free.clear()
        stats = self._stats
        self.last_flush = stats
        logger.debug(f'bupdate: {stats.entries_processed} entries over {stats.key_range}, '
                     f'appended={stats.leaves_appended} shrunk={stats.leaves_shrunk} '
                     f'split={stats.leaves_split} merged={stats.leaves_merged}')
        return stats

    def _update_level(self, pids: List[PageId], groups: List[List[OpqEntry]],
                      depth: int) -> Dict[PageId, ChildOutcome]:
        level = depth - 1
        read = self._stats.nodes_read_by_level
        read[level] = read.get(level, 0) + len(pids)
        if depth == self.height:
            return self._update_leaves(pids, groups)

        nodes = self._read_internal_many(pids)
        routed: List[Tuple[PageId, List[OpqEntry]]] = []
        for node, group in zip(nodes, groups):
            routed.extend((node.children[idx], part) for idx, part in route_entries(node, group))
        outcomes: Dict[PageId, ChildOutcome] = {}
        step = self.config.pio_max
        for i in range(0, len(routed), step):
            chunk = routed[i:i + step]
            outcomes.update(self._update_level([c for c, _ in chunk], [g for _, g in chunk], depth + 1))

        child_writes: Dict[PageId, bytes] = {}
        writes: Dict[PageId, bytes] = {}
        result: Dict[PageId, ChildOutcome] = {}
        for node in nodes:
            changed = self._apply_child_outcomes(node, outcomes, child_writes, depth + 1)
            result[node.page_id] = self._settle_internal(node, changed, writes, depth)
        if child_writes:
            self._write_pages(list(child_writes.items()))
        if writes:
            self._write_pages(list(writes.items()))
        return result

    def _update_leaves(self, pids: List[PageId], groups: List[List[OpqEntry]]) -> Dict[PageId, ChildOutcome]:
        g = self.geometry
        appends: List[Tuple[PageId, List[OpqEntry]]] = []
        full: List[Tuple[PageId, List[OpqEntry]]] = []
        for pid, entries in zip(pids, groups):
            # a delete can take the leaf below half full, so its live count must be known
            if any(e.op == OpFlag.DELETE for e in entries):
                full.append((pid, entries))
            else:
                appends.append((pid, entries))

        writes: Dict[PageId, bytes] = {}
        outcomes: Dict[PageId, ChildOutcome] = {}
        if appends:
            cursors = [self.lsmap.get(pid) for pid, _ in appends]
            pages = [pid + cursor for (pid, _), cursor in zip(appends, cursors)]
            segments = [decode_segment(p, d) for p, d in zip(pages, self.device.psync_read(pages))]
            for (pid, entries), cursor, segment in zip(appends, cursors, segments):
                room = (g.ls_capacity - len(segment.entries)) + (g.leaf_segments - 1 - cursor) * g.ls_capacity
                if len(entries) > room:
                    full.append((pid, entries))
                    continue
                self._append_to_leaf(writes, pid, cursor, segment, entries)
                outcomes[pid] = ChildOutcome()

        if full:
            full.sort(key=lambda item: item[1][0].key)
            for leaf, (pid, entries) in zip(self._read_leaves([p for p, _ in full]), full):
                self._stats.leaves_shrunk += 1
                outcomes[pid] = self._rebuild_leaf(writes, leaf, shrink(leaf.entries + entries))
        if writes:
            self._write_pages(list(writes.items()))
        return outcomes

    def _append_to_leaf(self, writes: Dict[PageId, bytes], pid: PageId, cursor: int,
                        segment: LeafSegment, entries: List[OpqEntry]) -> None:
        """Append to the last segment, spilling into the following empty segments."""
        cap, ps = self.geometry.ls_capacity, self.geometry.page_size
        index, current, pending = cursor, list(segment.entries), list(entries)
        while pending:
            if len(current) == cap:
                index, current = index + 1, []
                continue
            take = cap - len(current)
            current.extend(pending[:take])
            pending = pending[take:]
            next_leaf = segment.next_leaf if index == 0 else NIL_PAGE
            writes[pid + index] = encode_segment(LeafSegment(index, current, next_leaf), ps)
        self.lsmap.set(pid, self.lsmap.clamp(index))
        self._stats.leaves_appended += 1

    def _rebuild_leaf(self, writes: Dict[PageId, bytes], leaf: PioLeafNode,
                      records: Records) -> ChildOutcome:
        """Rewrite a shrunk leaf compacted, or split it into half-full leaves."""
        g = self.geometry
        if len(records) <= g.leaf_capacity:
            self._emit_leaf(writes, leaf.page_id, records, leaf.next_leaf)
            if leaf.page_id != self.root and len(records) < g.min_leaf:
                return ChildOutcome(underflow=True, records=records, next_leaf=leaf.next_leaf)
            return ChildOutcome()

        sizes = even_split(len(records), max(2, len(records) // max(1, g.leaf_capacity // 2)))
        pids = [leaf.page_id] + [self.device.alloc_extent(g.leaf_segments) for _ in sizes[1:]]
        fences = []
        pos = 0
        for i, size in enumerate(sizes):
            chunk = records[pos:pos + size]
            next_leaf = pids[i + 1] if i + 1 < len(pids) else leaf.next_leaf
            self._emit_leaf(writes, pids[i], chunk, next_leaf)
            if i:
                fences.append(FenceKeyRecord(chunk[0][0], pids[i], OpFlag.INSERT))
            pos += size
        self._stats.leaves_split += 1
        return ChildOutcome(fences=fences)

    def _apply_child_outcomes(self, node: InternalNode, outcomes: Dict[PageId, ChildOutcome],
                              child_writes: Dict[PageId, bytes], child_depth: int) -> bool:
        changed = False
        for idx in range(len(node.children) - 1, -1, -1):
            outcome = outcomes.get(node.children[idx])
            if outcome is None:
                continue
            for j, fence in enumerate(outcome.fences):
                node.keys.insert(idx + j, fence.key)
                node.children.insert(idx + 1 + j, fence.ptr)
                changed = True
        underflows = {pid for pid, outcome in outcomes.items() if outcome.underflow}
        return self._resolve_underflows(node.keys, node.children, underflows,
                                        child_depth, child_writes) or changed

    def _is_underfull(self, pid: PageId, depth: int, child_writes: Dict[PageId, bytes]) -> bool:
        if depth == self.height:
            view = self._leaf_views.get(pid)
            return view is not None and len(view[0]) < self.geometry.min_leaf
        return len(self._internal_view(pid, child_writes).children) < self.geometry.min_children

    def _resolve_underflows(self, keys: List[int], children: List[PageId], candidates: Set[PageId],
                            depth: int, child_writes: Dict[PageId, bytes]) -> bool:
        """
        Merge or redistribute underfull children with an adjacent sibling until none is
        left, editing ``keys`` and ``children`` in place.

        A merged child still under half full is paired again with its next neighbour.
        When a single child remains underfull it is recorded as unresolved: its parent
        is then underfull too, and the ancestor that merges that parent with a sibling
        pairs the child across the seam.
        """
        changed = False
        pending = [pid for pid in children if pid in candidates]
        while pending and len(children) > 1:
            pid = pending.pop(0)
            if pid not in children or not self._is_underfull(pid, depth, child_writes):
                continue
            self._unresolved.discard(pid)
            idx = children.index(pid)
            sep_idx = idx - 1 if idx > 0 else 0
            left, right = children[sep_idx], children[sep_idx + 1]
            if depth == self.height:
                fence = self._fix_leaf_pair(left, right, child_writes)
            else:
                fence = self._fix_internal_pair(left, right, keys[sep_idx], child_writes, depth)
            if fence.op == OpFlag.DELETE:
                del keys[sep_idx]
                del children[sep_idx + 1]
                self._unresolved.discard(right)
                if self._is_underfull(left, depth, child_writes):
                    pending.insert(0, left)
            else:
                keys[sep_idx] = fence.key
            changed = True
        if len(children) == 1 and self._is_underfull(children[0], depth, child_writes):
            self._unresolved.add(children[0])
        return changed

    def _fix_leaf_pair(self, left: PageId, right: PageId,
                       child_writes: Dict[PageId, bytes]) -> FenceKeyRecord:
        """Merge two adjacent leaves or redistribute their records evenly."""
        views = {pid: self._leaf_views[pid] for pid in (left, right) if pid in self._leaf_views}
        missing = [pid for pid in (left, right) if pid not in views]
        if missing:
            for leaf in self._read_leaves(missing):
                views[leaf.page_id] = (shrink(leaf.entries), leaf.next_leaf)

        (left_records, _), (right_records, right_next) = views[left], views[right]
        records = left_records + right_records
        if len(records) <= self.geometry.leaf_capacity:
            self._emit_leaf(child_writes, left, records, right_next)
            for i in range(self.geometry.leaf_segments):
                child_writes.pop(right + i, None)
            self.lsmap.discard(right)
            self._leaf_views.pop(right, None)
            self._defer_free(right, self.geometry.leaf_segments)
            self._stats.leaves_merged += 1
            return FenceKeyRecord(right_records[0][0] if right_records else 0, right, OpFlag.DELETE)

        keep = (len(records) + 1) // 2
        self._emit_leaf(child_writes, left, records[:keep], right)
        self._emit_leaf(child_writes, right, records[keep:], right_next)
        self._stats.leaves_redistributed += 1
        return FenceKeyRecord(records[keep][0], right, OpFlag.UPDATE)

    def _internal_view(self, pid: PageId, child_writes: Dict[PageId, bytes]) -> InternalNode:
        if pid in child_writes:
            return decode_node(pid, child_writes[pid])
        return self._read_internal_many([pid])[0]

    def _fix_internal_pair(self, left_pid: PageId, right_pid: PageId, separator: int,
                           child_writes: Dict[PageId, bytes], depth: int) -> FenceKeyRecord:
        """Merge or redistribute two adjacent internal nodes at ``depth``, first fixing
        unresolved children that become siblings across the seam."""
        ps = self.geometry.page_size
        left = self._internal_view(left_pid, child_writes)
        right = self._internal_view(right_pid, child_writes)
        keys = left.keys + [separator] + right.keys
        children = left.children + right.children
        seam = {c for c in children if c in self._unresolved}
        if seam:
            self._resolve_underflows(keys, children, seam, depth + 1, child_writes)
        if len(children) <= self.geometry.fanout:
            left.keys, left.children = keys, children
            child_writes[left_pid] = encode_internal(left, ps)
            child_writes.pop(right_pid, None)
            self._defer_free(right_pid, 1)
            return FenceKeyRecord(separator, right_pid, OpFlag.DELETE)
        keep = (len(children) + 1) // 2
        left.keys, left.children = keys[:keep - 1], children[:keep]
        right.keys, right.children = keys[keep:], children[keep:]
        child_writes[left_pid] = encode_internal(left, ps)
        child_writes[right_pid] = encode_internal(right, ps)
        return FenceKeyRecord(keys[keep - 1], right_pid, OpFlag.UPDATE)

    def _settle_internal(self, node: InternalNode, changed: bool, writes: Dict[PageId, bytes],
                         depth: int) -> ChildOutcome:
        """Split an overflowing node multi-way and stage the level's node writes."""
        outcome = ChildOutcome()
        if depth == 1:
            self._root_fanout = len(node.children)
        if not changed:
            return outcome
        g, ps = self.geometry, self.geometry.page_size
        if len(node.children) > g.fanout:
            sizes = even_split(len(node.children), max(2, math.ceil(len(node.children) / g.fanout)))
            keys, children = node.keys, node.children
            pos = sizes[0]
            node.keys, node.children = keys[:pos - 1], children[:pos]
            for size in sizes[1:]:
                sibling = InternalNode(self.device.alloc_page(), keys[pos:pos + size - 1],
                                       children[pos:pos + size])
                writes[sibling.page_id] = encode_internal(sibling, ps)
                outcome.fences.append(FenceKeyRecord(keys[pos - 1], sibling.page_id, OpFlag.INSERT))
                pos += size
            self._stats.internal_splits += len(sizes) - 1
            if depth == 1:
                self._root_fanout = len(node.children)
        writes[node.page_id] = encode_internal(node, ps)
        outcome.underflow = depth > 1 and len(node.children) < g.min_children
        return outcome

    def _settle_root(self, outcome: ChildOutcome) -> None:
        while outcome.fences:
            fences = outcome.fences
            root = InternalNode(self.device.alloc_page(), [f.key for f in fences],
                                [self.root] + [f.ptr for f in fences])
            self.root, self.height = root.page_id, self.height + 1
            self._stats.height_change += 1
            writes: Dict[PageId, bytes] = {}
            outcome = self._settle_internal(root, True, writes, 1)
            self._write_pages(list(writes.items()))
        fanout = self._root_fanout
        while self.height > 1 and fanout == 1:
            node = self._read_internal_many([self.root])[0]
            if len(node.children) != 1:
                break
            self._defer_free(self.root, 1)
            self.root, self.height = node.children[0], self.height - 1
            self._stats.height_change -= 1
            fanout = len(self._read_internal_many([self.root])[0].children) if self.height > 1 else None

    # Bulk load and maintenance

    def bulk_load(self, records, fill_factor: float = 1.0) -> 'PioBTree':
        """Replace the empty root leaf with a bottom-up build of ascending records."""
        if self.height != 1 or len(self.opq) or self._peek_leaf(self.root).entries:
            raise TreeError('bulk load requires an empty tree')
        keys, ptrs = split_sorted_records(records)
        if not keys:
            return self
        g = self.geometry
        self.lsmap.discard(self.root)
        self.device.free_extent(self.root, g.leaf_segments)

        def encode(pid: PageId, leaf_keys: List[int], leaf_ptrs: List[int], next_leaf: PageId) -> bytes:
            return self._leaf_image(pid, list(zip(leaf_keys, leaf_ptrs)), next_leaf)

        layout = build_levels(keys, ptrs, fill_factor, g.fanout, g.leaf_capacity, g.page_size,
                              lambda: self.device.alloc_extent(g.leaf_segments),
                              self.device.alloc_page, encode)
        self._write_leaf_images(layout.leaf_writes)
        write_in_batches(self.device, layout.internal_writes, 1)
        self.root, self.height = layout.root, layout.height
        self._store_superblock()
        logger.info(f'bulk loaded {len(keys)} records: {len(layout.leaf_pages)} leaves, '
                    f'height={self.height}, U={fill_factor}')
        return self

    def warm_up(self) -> int:
        """Prefetch internal levels top-down into the pool until it is full."""
        return prefetch_levels(self.pool, self.root, self.height)

    def _scan_structure(self) -> Tuple[List[PageId], List[PageId]]:
        """Internal node ids and leaf ids (key order), read without I/O accounting."""
        internals: List[PageId] = []
        leaves: List[PageId] = []

        def visit(pid: PageId, depth: int) -> None:
            if depth == self.height:
                leaves.append(pid)
                return
            internals.append(pid)
            node = decode_node(pid, self.pool.peek(pid))
            for child in node.children:
                visit(child, depth + 1)

        visit(self.root, 1)
        return internals, leaves

    def audit(self) -> int:
        """
        Structural audit without I/O accounting: separator bounds, node utilization,
        LSMap consistency and sibling-chain order.

        Returns:
            Number of live records stored in the leaves (queued entries excluded)
        """
        g = self.geometry
        leaves: List[PioLeafNode] = []

        def visit(pid: PageId, depth: int, low: Optional[int], high: Optional[int]) -> int:
            if depth == self.height:
                leaf = self._peek_leaf(pid)
                keys = sorted({e.key for e in leaf.entries})
                check_sorted_within(keys, low, high, pid)
                expected = self.lsmap.clamp(leaf.last_segment)
                if self.lsmap.get(pid) != expected:
                    raise TreeError(f'leaf {pid}: LSMap says {self.lsmap.get(pid)}, leaf says {expected}')
                leaves.append(leaf)
                live = len(shrink(leaf.entries))
                if depth > 1 and live < g.min_leaf:
                    raise TreeError(f'leaf {pid} holds {live} records, below the minimum of {g.min_leaf}')
                return live
            node = decode_node(pid, self.pool.peek(pid))
            if not isinstance(node, InternalNode):
                raise TreeError(f'page {pid}: expected an internal node at depth {depth}')
            check_sorted_within(node.keys, low, high, pid, inclusive_high=True)
            count = len(node.children)
            if count > g.fanout or (depth == 1 and count < 2) or (depth > 1 and count < g.min_children):
                raise TreeError(f'internal node {pid} has {count} children')
            total = 0
            for i, child in enumerate(node.children):
                c_low, c_high = node.child_bounds(i)
                total += visit(child, depth + 1, low if c_low is None else c_low,
                               high if c_high is None else c_high)
            return total

        live = visit(self.root, 1, None, None)
        check_sibling_chain(leaves)
        return live
