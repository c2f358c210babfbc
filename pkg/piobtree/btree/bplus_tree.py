import bisect
import logging
from typing import Callable, Iterable, List, NamedTuple, Optional, Set, Tuple

from piobtree.btree.buffer_pool import BufferPool
from piobtree.btree.models import (
    KIND_BASELINE, NIL_PAGE, SUPERBLOCK_PAGE, IndexRecord, InternalNode, LeafNode, Node,
    Superblock, TreeGeometry, decode_node, encode_internal, encode_leaf, pack_counts,
)
from piobtree.device.base import BlockDevice
from piobtree.device.models import PageId
from piobtree.exceptions import (
    ConfigError, CorruptPageError, DuplicateKeyError, TreeError, UnsortedInputError,
)

logger = logging.getLogger(__name__)

Path = List[Tuple[InternalNode, int]]


def claim_superblock(device: BlockDevice) -> None:
    """Reserve page 0 of a fresh device for the tree superblock."""
    if device.is_allocated(SUPERBLOCK_PAGE):
        raise TreeError('device already holds a tree')
    page = device.alloc_page()
    if page != SUPERBLOCK_PAGE:
        raise TreeError(f'superblock must live at page {SUPERBLOCK_PAGE}, got {page}')


def load_superblock(device: BlockDevice) -> Superblock:
    """Read the superblock without I/O accounting (used while opening)."""
    superblock = Superblock.from_bytes(device.snapshot_pages([SUPERBLOCK_PAGE])[0])
    if superblock.page_size != device.config.page_size:
        raise ConfigError(f'tree page size {superblock.page_size} does not match '
                          f'device page size {device.config.page_size}')
    return superblock


def store_superblock(device: BlockDevice, superblock: Superblock) -> None:
    device.psync_write([(SUPERBLOCK_PAGE, superblock.to_bytes())])


def write_in_batches(device: BlockDevice, writes: List[Tuple[PageId, bytes]], unit_pages: int,
                     limit: Optional[int] = None) -> int:
    """Write node images in psync batches of at most ``limit`` requests; returns batch count."""
    step = min(limit or device.config.max_batch, device.config.max_batch)
    batches = 0
    for i in range(0, len(writes), step):
        device.psync_write(writes[i:i + step], unit_pages)
        batches += 1
    return batches


class BPlusTree:
    """
    Baseline B+-tree over a block device with an LRU write-back buffer pool.

    Every node access goes through the pool; a miss is a single-request psync read,
    so an unbuffered search costs exactly ``height`` page reads.
    """

    def __init__(self, device: BlockDevice, geometry: TreeGeometry, buffer_pages: int = 0,
                 root: PageId = NIL_PAGE, height: int = 0, write_back: bool = True):
        self.device = device
        self.geometry = geometry
        self.pool = BufferPool(device, buffer_pages, geometry.node_pages, write_back=write_back)
        self.root = root
        self.height = height
        self._superblock_dirty = False

    # Lifecycle

    @classmethod
    def create(cls, device: BlockDevice, node_pages: int = 1, fanout: int = 0,
               leaf_capacity: int = 0, buffer_pages: int = 0, write_back: bool = True) -> 'BPlusTree':
        """Create an empty tree on a fresh device; ``write_back=False`` writes every update through."""
        geometry = TreeGeometry(device.config.page_size, node_pages, fanout, leaf_capacity)
        claim_superblock(device)
        tree = cls(device, geometry, buffer_pages, write_back=write_back)
        tree._store_superblock()
        logger.info(f'created B+-tree: F={geometry.fanout}, leaf capacity={geometry.leaf_capacity}, '
                    f'node={node_pages} page(s), buffer={buffer_pages} page(s)')
        return tree

    @classmethod
    def open(cls, device: BlockDevice, buffer_pages: int = 0) -> 'BPlusTree':
        """Reopen a persisted tree and rebuild the device allocation map."""
        superblock = load_superblock(device)
        if superblock.kind != KIND_BASELINE:
            raise TreeError(f'superblock kind {superblock.kind} is not a baseline B+-tree')
        geometry = TreeGeometry(superblock.page_size, superblock.node_pages,
                                superblock.fanout, superblock.leaf_capacity)
        tree = cls(device, geometry, buffer_pages, superblock.root, superblock.height)
        device.reset_allocation(tree._reachable_pages())
        logger.info(f'opened B+-tree: root={tree.root}, height={tree.height}')
        return tree

    def close(self) -> None:
        self.buffer_flush_all()

    def superblock(self) -> Superblock:
        g = self.geometry
        return Superblock(kind=KIND_BASELINE, page_size=g.page_size, node_pages=g.node_pages,
                          fanout=g.fanout, leaf_capacity=g.leaf_capacity, root=self.root,
                          height=self.height)

    def _store_superblock(self) -> None:
        store_superblock(self.device, self.superblock())
        self._superblock_dirty = False

    # Buffer pool access

    def buffer_get(self, page_id: PageId) -> bytes:
        return self.pool.get(page_id)

    def buffer_flush_all(self) -> int:
        written = self.pool.flush_all()
        if self._superblock_dirty:
            self._store_superblock()
        return written

    def _read(self, page_id: PageId) -> Node:
        return decode_node(page_id, self.pool.get(page_id))

    def _write(self, node: Node) -> None:
        size = self.geometry.node_bytes
        data = encode_leaf(node, size) if isinstance(node, LeafNode) else encode_internal(node, size)
        self.pool.put(node.page_id, data)

    def _encode_bulk_leaf(self, page_id: PageId, keys: List[int], ptrs: List[int],
                          next_leaf: PageId) -> bytes:
        return encode_leaf(LeafNode(page_id, keys, ptrs, next_leaf), self.geometry.node_bytes)

    def _alloc(self) -> PageId:
        return self.device.alloc_extent(self.geometry.node_pages)

    def _free(self, page_id: PageId) -> None:
        self.pool.discard(page_id)
        self.device.free_extent(page_id, self.geometry.node_pages)

    def _set_root(self, root: PageId, height: int) -> None:
        self.root = root
        self.height = height
        self._superblock_dirty = True

    # Point operations

    def _descend(self, key: int) -> Tuple[LeafNode, Path]:
        path: Path = []
        page_id = self.root
        for _ in range(self.height - 1):
            node = self._read(page_id)
            idx = node.child_index(key)
            path.append((node, idx))
            page_id = node.children[idx]
        return self._read(page_id), path

    def search(self, key: int) -> Optional[int]:
        """Return the data pointer stored under ``key``, or None."""
        if self.root == NIL_PAGE:
            return None
        leaf, _ = self._descend(key)
        pos = bisect.bisect_left(leaf.keys, key)
        if pos < len(leaf.keys) and leaf.keys[pos] == key:
            return leaf.ptrs[pos]
        return None

    def insert(self, key: int, data_ptr: int) -> None:
        if self.root == NIL_PAGE:
            leaf = LeafNode(self._alloc(), [key], [data_ptr])
            self._write(leaf)
            self._set_root(leaf.page_id, 1)
            return
        leaf, path = self._descend(key)
        pos = bisect.bisect_left(leaf.keys, key)
        if pos < len(leaf.keys) and leaf.keys[pos] == key:
            raise DuplicateKeyError(f'key {key} already present')
        leaf.keys.insert(pos, key)
        leaf.ptrs.insert(pos, data_ptr)
        if len(leaf) <= self.geometry.leaf_capacity:
            self._write(leaf)
            return
        right = self._split_leaf(leaf)
        self._insert_into_parent(path, leaf.page_id, right.keys[0], right.page_id)

    def update(self, key: int, data_ptr: int) -> bool:
        """Replace the pointer of an existing key; an absent key is a no-op."""
        if self.root == NIL_PAGE:
            return False
        leaf, _ = self._descend(key)
        pos = bisect.bisect_left(leaf.keys, key)
        if pos == len(leaf.keys) or leaf.keys[pos] != key:
            return False
        leaf.ptrs[pos] = data_ptr
        self._write(leaf)
        return True

    def delete(self, key: int) -> bool:
        """Remove ``key``; returns False (and changes nothing) when it is absent."""
        if self.root == NIL_PAGE:
            return False
        leaf, path = self._descend(key)
        pos = bisect.bisect_left(leaf.keys, key)
        if pos == len(leaf.keys) or leaf.keys[pos] != key:
            return False
        del leaf.keys[pos]
        del leaf.ptrs[pos]
        if not path:
            if leaf.keys:
                self._write(leaf)
            else:
                self._free(leaf.page_id)
                self._set_root(NIL_PAGE, 0)
            return True
        if len(leaf) >= self.geometry.min_leaf:
            self._write(leaf)
            return True
        self._rebalance(leaf, path)
        return True

    # Structure modification

    def _split_leaf(self, leaf: LeafNode) -> LeafNode:
        keep = (len(leaf) + 1) // 2
        right = LeafNode(self._alloc(), leaf.keys[keep:], leaf.ptrs[keep:], leaf.next_leaf)
        del leaf.keys[keep:]
        del leaf.ptrs[keep:]
        leaf.next_leaf = right.page_id
        self._write(leaf)
        self._write(right)
        return right

    def _split_internal(self, node: InternalNode) -> Tuple[InternalNode, int]:
        keep = (len(node.children) + 1) // 2
        separator = node.keys[keep - 1]
        right = InternalNode(self._alloc(), node.keys[keep:], node.children[keep:])
        del node.keys[keep - 1:]
        del node.children[keep:]
        self._write(node)
        self._write(right)
        return right, separator

    def _insert_into_parent(self, path: Path, left: PageId, separator: int, right: PageId) -> None:
        while path:
            parent, idx = path.pop()
            parent.keys.insert(idx, separator)
            parent.children.insert(idx + 1, right)
            if len(parent.children) <= self.geometry.fanout:
                self._write(parent)
                return
            new_node, separator = self._split_internal(parent)
            left, right = parent.page_id, new_node.page_id
        new_root = InternalNode(self._alloc(), [separator], [left, right])
        self._write(new_root)
        self._set_root(new_root.page_id, self.height + 1)
        logger.debug(f'root split: height now {self.height}')

    def _rebalance(self, node: Node, path: Path) -> None:
        """Fix an underflowing node by merging with or borrowing from an adjacent sibling."""
        g = self.geometry
        while path:
            parent, idx = path.pop()
            if idx > 0:
                left, right, sep_idx = self._read(parent.children[idx - 1]), node, idx - 1
            else:
                left, right, sep_idx = node, self._read(parent.children[1]), 0
            if isinstance(node, LeafNode):
                self._fix_leaves(left, right, parent, sep_idx)
            else:
                self._fix_internals(left, right, parent, sep_idx)

            if not path:
                if len(parent.children) == 1:
                    self._free(parent.page_id)
                    self._set_root(parent.children[0], self.height - 1)
                    logger.debug(f'root collapsed: height now {self.height}')
                else:
                    self._write(parent)
                return
            if len(parent.children) >= g.min_children:
                self._write(parent)
                return
            node = parent

    def _fix_leaves(self, left: LeafNode, right: LeafNode, parent: InternalNode, sep_idx: int) -> None:
        if len(left) + len(right) <= self.geometry.leaf_capacity:
            left.keys.extend(right.keys)
            left.ptrs.extend(right.ptrs)
            left.next_leaf = right.next_leaf
            del parent.keys[sep_idx]
            del parent.children[sep_idx + 1]
            self._write(left)
            self._free(right.page_id)
            return
        keys, ptrs = left.keys + right.keys, left.ptrs + right.ptrs
        keep = (len(keys) + 1) // 2
        left.keys, left.ptrs = keys[:keep], ptrs[:keep]
        right.keys, right.ptrs = keys[keep:], ptrs[keep:]
        parent.keys[sep_idx] = right.keys[0]
        self._write(left)
        self._write(right)

    def _fix_internals(self, left: InternalNode, right: InternalNode, parent: InternalNode,
                       sep_idx: int) -> None:
        keys = left.keys + [parent.keys[sep_idx]] + right.keys
        children = left.children + right.children
        if len(children) <= self.geometry.fanout:
            left.keys, left.children = keys, children
            del parent.keys[sep_idx]
            del parent.children[sep_idx + 1]
            self._write(left)
            self._free(right.page_id)
            return
        keep = (len(children) + 1) // 2
        left.keys, left.children = keys[:keep - 1], children[:keep]
        parent.keys[sep_idx] = keys[keep - 1]
        right.keys, right.children = keys[keep:], children[keep:]
        self._write(left)
        self._write(right)

    # Range search

    def range_search_legacy(self, start: int, end: int) -> List[IndexRecord]:
        """
        Records with start <= key < end, found by one descent and a walk along the
        leaf sibling chain (one single-page read per leaf).

        The walk stops early when the parent kept from the descent shows that the next
        leaf begins at or beyond ``end``.
        """
        if start >= end or self.root == NIL_PAGE:
            return []
        leaf, path = self._descend(start)
        parent, idx, parent_high = None, 0, None
        high = None
        for node, i in path:
            parent, idx, parent_high = node, i, high
            high = node.keys[i] if i < len(node.keys) else high
        bound_known = True

        results: List[IndexRecord] = []
        while True:
            lo = bisect.bisect_left(leaf.keys, start)
            hi = bisect.bisect_left(leaf.keys, end)
            results.extend(IndexRecord(k, p) for k, p in zip(leaf.keys[lo:hi], leaf.ptrs[lo:hi]))
            if hi < len(leaf.keys):
                break
            if bound_known and high is not None and high >= end:
                break
            if leaf.next_leaf == NIL_PAGE:
                break
            leaf = self._read(leaf.next_leaf)
            if parent is not None and bound_known and idx + 1 < len(parent.children):
                idx += 1
                high = parent.keys[idx] if idx < len(parent.keys) else parent_high
            else:
                bound_known = False
        return results

    # Bulk load

    def bulk_load(self, records: Iterable[Tuple[int, int]], fill_factor: float = 1.0) -> 'BPlusTree':
        """
        Build the tree bottom-up from strictly ascending records.

        Args:
            records: (key, data_ptr) pairs in ascending key order
            fill_factor: target node utilization U in (0, 1]

        Returns:
            self
        """
        if self.root != NIL_PAGE:
            raise TreeError('bulk load requires an empty tree')
        keys, ptrs = split_sorted_records(records)
        if not keys:
            return self
        g = self.geometry
        layout = build_levels(keys, ptrs, fill_factor, g.fanout, g.leaf_capacity, g.node_bytes,
                              self._alloc, self._alloc, self._encode_bulk_leaf)
        write_in_batches(self.device, layout.leaf_writes + layout.internal_writes, g.node_pages)
        root, height = layout.root, layout.height
        self._set_root(root, height)
        self._store_superblock()
        logger.info(f'bulk loaded {len(keys)} records: height={height}, U={fill_factor}')
        return self

    def warm_up(self) -> int:
        """
        Fill the pool top-down, root first, leaves last while frames remain.

        Internal nodes stay pinned, so the pool keeps caching the upper levels
        whatever the leaf access pattern.
        """
        return prefetch_levels(self.pool, self.root, self.height, leaves=True, pin=True)

    # Audit

    def _peek(self, page_id: PageId) -> Node:
        return decode_node(page_id, self.pool.peek(page_id))

    def _reachable_pages(self) -> Set[PageId]:
        pages = {SUPERBLOCK_PAGE}
        if self.root == NIL_PAGE:
            return pages
        stack = [self.root]
        while stack:
            page_id = stack.pop()
            pages.update(range(page_id, page_id + self.geometry.node_pages))
            node = self._peek(page_id)
            if isinstance(node, InternalNode):
                stack.extend(node.children)
        return pages

    def audit(self) -> int:
        """
        Walk the whole tree without I/O accounting and check sortedness, separator
        bounds, utilization and sibling-chain order.

        Returns:
            Number of records in the tree
        """
        if self.root == NIL_PAGE:
            if self.height != 0:
                raise TreeError(f'empty tree with height {self.height}')
            return 0
        leaves: List[LeafNode] = []
        g = self.geometry

        def visit(page_id: PageId, depth: int, low: Optional[int], high: Optional[int]) -> int:
            node = self._peek(page_id)
            is_root = depth == 1
            if isinstance(node, InternalNode):
                if depth >= self.height:
                    raise TreeError(f'internal node {page_id} at leaf depth {depth}')
                check_sorted_within(node.keys, low, high, page_id, inclusive_high=True)
                if not is_root and len(node.children) < g.min_children:
                    raise TreeError(f'internal node {page_id} underfull: {len(node.children)}')
                if len(node.children) > g.fanout or (is_root and len(node.children) < 2):
                    raise TreeError(f'internal node {page_id} has {len(node.children)} children')
                total = 0
                for i, child in enumerate(node.children):
                    c_low, c_high = node.child_bounds(i)
                    total += visit(child, depth + 1,
                                   low if c_low is None else c_low,
                                   high if c_high is None else c_high)
                return total
            if depth != self.height:
                raise TreeError(f'leaf {page_id} at depth {depth}, height {self.height}')
            check_sorted_within(node.keys, low, high, page_id)
            if len(node) > g.leaf_capacity or (not is_root and len(node) < g.min_leaf):
                raise TreeError(f'leaf {page_id} holds {len(node)} records')
            leaves.append(node)
            return len(node)

        count = visit(self.root, 1, None, None)
        check_sibling_chain(leaves)
        return count


def split_sorted_records(records: Iterable[Tuple[int, int]]) -> Tuple[List[int], List[int]]:
    keys: List[int] = []
    ptrs: List[int] = []
    for key, ptr in records:
        if keys and key <= keys[-1]:
            raise UnsortedInputError(f'bulk-load input not strictly ascending at key {key}')
        keys.append(key)
        ptrs.append(ptr)
    return keys, ptrs


class BulkLayout(NamedTuple):
    root: PageId
    height: int
    leaf_pages: List[PageId]
    leaf_writes: List[Tuple[PageId, bytes]]
    internal_writes: List[Tuple[PageId, bytes]]


def build_levels(keys: List[int], ptrs: List[int], fill_factor: float, fanout: int,
                 leaf_capacity: int, internal_bytes: int, alloc_leaf: Callable[[], PageId],
                 alloc_internal: Callable[[], PageId],
                 encode_leaf_fn: Callable[[PageId, List[int], List[int], PageId], bytes]) -> BulkLayout:
    """
    Lay out leaves and internal levels for a bulk load.

    Leaves hold ``U * capacity`` records and internal nodes ``U * (F - 1)`` children,
    both clamped to the half-full minimum; a level of at most F nodes becomes the
    children of the root. Separators are the minimum key of each child.
    """
    if not 0 < fill_factor <= 1:
        raise ConfigError(f'fill factor {fill_factor} outside (0, 1]')
    min_leaf = leaf_capacity // 2
    min_children = (fanout + 1) // 2
    per_leaf = min(leaf_capacity, max(1, min_leaf, int(leaf_capacity * fill_factor)))
    counts = pack_counts(len(keys), per_leaf, min_leaf, leaf_capacity)
    pages = [alloc_leaf() for _ in counts]
    leaf_writes: List[Tuple[PageId, bytes]] = []
    level: List[Tuple[int, PageId]] = []
    pos = 0
    for i, n in enumerate(counts):
        next_leaf = pages[i + 1] if i + 1 < len(pages) else NIL_PAGE
        leaf_writes.append((pages[i], encode_leaf_fn(pages[i], keys[pos:pos + n],
                                                     ptrs[pos:pos + n], next_leaf)))
        level.append((keys[pos], pages[i]))
        pos += n

    per_node = min(fanout, max(min_children, int((fanout - 1) * fill_factor)))
    internal_writes: List[Tuple[PageId, bytes]] = []
    height = 1
    while len(level) > 1:
        if len(level) <= fanout:
            counts = [len(level)]
        else:
            counts = pack_counts(len(level), per_node, min_children, fanout)
        upper: List[Tuple[int, PageId]] = []
        pos = 0
        for n in counts:
            group = level[pos:pos + n]
            node = InternalNode(alloc_internal(), [k for k, _ in group[1:]], [p for _, p in group])
            internal_writes.append((node.page_id, encode_internal(node, internal_bytes)))
            upper.append((group[0][0], node.page_id))
            pos += n
        level = upper
        height += 1
    return BulkLayout(level[0][1], height, pages, leaf_writes, internal_writes)


def prefetch_levels(pool: BufferPool, root: PageId, height: int, leaves: bool = False,
                    pin: bool = False) -> int:
    """
    Load tree levels top-down into ``pool`` until its frames are used up.

    Internal levels always come first; the leaf level follows with ``leaves``.
    With ``pin`` the internal nodes are pinned so leaf misses never evict them.
    """
    levels = height if leaves else height - 1
    if levels <= 0 or pool.frames == 0:
        return 0
    level, loaded = [root], 0
    step = pool.device.config.max_batch
    for depth in range(levels):
        batch = level[:pool.frames - loaded]
        if not batch:
            break
        nodes = []
        for i in range(0, len(batch), step):
            chunk = batch[i:i + step]
            nodes.extend(decode_node(p, d) for p, d in zip(chunk, pool.get_many(chunk)))
            if pin and depth < height - 1:
                pool.pin(chunk)
        loaded += len(batch)
        if len(batch) < len(level):
            break
        level = [c for node in nodes if isinstance(node, InternalNode) for c in node.children]
    logger.debug(f'warmed {loaded} nodes into the buffer pool ({pool.pinned_count} pinned)')
    return loaded


def check_sorted_within(keys: List[int], low: Optional[int], high: Optional[int], page_id: PageId,
                        inclusive_high: bool = False) -> None:
    for a, b in zip(keys, keys[1:]):
        if a >= b:
            raise TreeError(f'node {page_id}: keys not strictly ascending ({a}, {b})')
    if not keys:
        return
    if low is not None and keys[0] < low:
        raise TreeError(f'node {page_id}: key {keys[0]} below separator {low}')
    if high is not None and (keys[-1] > high or (not inclusive_high and keys[-1] == high)):
        raise TreeError(f'node {page_id}: key {keys[-1]} not below separator {high}')


def check_sibling_chain(leaves: List) -> None:
    for leaf, following in zip(leaves, leaves[1:]):
        if leaf.next_leaf != following.page_id:
            raise CorruptPageError(f'leaf {leaf.page_id} links to {leaf.next_leaf}, '
                                   f'expected {following.page_id}')
    if leaves and leaves[-1].next_leaf != NIL_PAGE:
        raise CorruptPageError(f'last leaf {leaves[-1].page_id} has a successor')
