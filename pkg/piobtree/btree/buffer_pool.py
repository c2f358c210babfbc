import logging
from collections import OrderedDict
from typing import Dict, Iterable, List, Sequence

from piobtree.device.base import BlockDevice
from piobtree.device.models import PageId

logger = logging.getLogger(__name__)


class BufferPool:
    """
    LRU page cache in front of a block device.

    Frames hold raw node buffers of ``unit_pages`` pages. With ``write_back`` the
    pool keeps dirty frames until eviction or ``flush_all``; otherwise every ``put``
    is written through. A capacity of zero frames disables caching entirely.
    Pinned frames are never evicted and shrink the LRU share of the pool.
    """

    def __init__(self, device: BlockDevice, capacity_pages: int, unit_pages: int = 1,
                 write_back: bool = True):
        self.device = device
        self.capacity_pages = capacity_pages
        self.unit_pages = unit_pages
        self.write_back = write_back
        self.frames = max(0, capacity_pages // unit_pages)
        self._cache: 'OrderedDict[PageId, bytes]' = OrderedDict()
        self._pinned: Dict[PageId, bytes] = {}
        self._dirty = set()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def __contains__(self, page_id: PageId) -> bool:
        return page_id in self._cache or page_id in self._pinned

    def __len__(self) -> int:
        return len(self._cache) + len(self._pinned)

    @property
    def dirty_count(self) -> int:
        return len(self._dirty)

    @property
    def pinned_count(self) -> int:
        return len(self._pinned)

    @property
    def lru_frames(self) -> int:
        return self.frames - len(self._pinned)

    def get(self, page_id: PageId) -> bytes:
        """Read-through lookup; a miss costs one single-request psync read."""
        return self.get_many([page_id])[0]

    def get_many(self, page_ids: Sequence[PageId]) -> List[bytes]:
        """Lookup several pages; all misses are fetched in one psync batch."""
        found: Dict[PageId, bytes] = {}
        missing = []
        for page_id in page_ids:
            if page_id in self._pinned:
                found[page_id] = self._pinned[page_id]
                self.hits += 1
            elif page_id in self._cache:
                self._cache.move_to_end(page_id)
                found[page_id] = self._cache[page_id]
                self.hits += 1
            elif page_id not in missing:
                missing.append(page_id)
        if missing:
            self.misses += len(missing)
            buffers = self.device.psync_read(missing, self.unit_pages)
            for page_id, data in zip(missing, buffers):
                found[page_id] = data
                self._install(page_id, data, dirty=False)
        return [found[page_id] for page_id in page_ids]

    def pin(self, page_ids: Iterable[PageId]) -> int:
        """
        Keep resident pages in the pool for good, while frames last.

        Returns:
            Number of pages newly pinned
        """
        pinned = 0
        for page_id in page_ids:
            if page_id in self._pinned or page_id not in self._cache or len(self._pinned) >= self.frames:
                continue
            self._pinned[page_id] = self._cache.pop(page_id)
            pinned += 1
        return pinned

    def peek(self, page_id: PageId) -> bytes:
        """Current image of a node without LRU promotion or I/O accounting."""
        if page_id in self._pinned:
            return self._pinned[page_id]
        if page_id in self._cache:
            return self._cache[page_id]
        pages = range(page_id, page_id + self.unit_pages)
        return b''.join(self.device.snapshot_pages(pages))

    def put(self, page_id: PageId, data: bytes) -> None:
        """Store a modified node buffer (dirty under write-back, else written through)."""
        if page_id in self._pinned:
            self._pinned[page_id] = data
            if self.write_back:
                self._dirty.add(page_id)
            else:
                self.device.psync_write([(page_id, data)], self.unit_pages)
            return
        if self.write_back and self._install(page_id, data, dirty=True):
            return
        self.device.psync_write([(page_id, data)], self.unit_pages)
        if page_id in self._cache:
            self._cache[page_id] = data
            self._cache.move_to_end(page_id)
        else:
            self._install(page_id, data, dirty=False)

    def refresh(self, page_id: PageId, data: bytes) -> None:
        """Replace a resident copy after the caller wrote the page itself."""
        frames = self._pinned if page_id in self._pinned else self._cache
        if page_id in frames:
            frames[page_id] = data
            self._dirty.discard(page_id)

    def discard(self, page_id: PageId) -> None:
        """Drop a frame without writing it (the page was freed)."""
        self._cache.pop(page_id, None)
        self._pinned.pop(page_id, None)
        self._dirty.discard(page_id)

    def flush_all(self) -> int:
        """Write every dirty frame in psync batches; returns the number of frames written."""
        dirty = [(p, d) for frames in (self._pinned, self._cache) for p, d in frames.items()
                 if p in self._dirty]
        step = self.device.config.max_batch
        for i in range(0, len(dirty), step):
            self.device.psync_write(dirty[i:i + step], self.unit_pages)
        self._dirty.clear()
        if dirty:
            logger.debug(f'buffer pool flushed {len(dirty)} dirty frames')
        return len(dirty)

    def clear(self) -> None:
        """Forget every frame without writing (crash simulation)."""
        self._cache.clear()
        self._pinned.clear()
        self._dirty.clear()

    def _install(self, page_id: PageId, data: bytes, dirty: bool) -> bool:
        """Cache ``data`` in an LRU frame; False when no unpinned frame exists."""
        if self.lru_frames <= 0:
            return False
        self._cache[page_id] = data
        self._cache.move_to_end(page_id)
        if dirty:
            self._dirty.add(page_id)
        while len(self._cache) > self.lru_frames:
            victim, victim_data = self._cache.popitem(last=False)
            self.evictions += 1
            if victim in self._dirty:
                self._dirty.remove(victim)
                self.device.psync_write([(victim, victim_data)], self.unit_pages)
        return True
