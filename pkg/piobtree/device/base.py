import bisect
import logging
import math
from abc import ABC, abstractmethod
from typing import Iterable, List, Optional, Sequence, Tuple

from piobtree.device.models import (
    DeviceConfig, DeviceStats, IoBatch, IoKind, IoRequest, PageId,
)
from piobtree.exceptions import (
    AddressError, DoubleFreeError, OutOfSpaceError, UsageError,
)

logger = logging.getLogger(__name__)


class BlockDevice(ABC):
    """
    Page-addressed device with batched synchronous I/O ("psync" I/O).

    A psync call delivers a whole batch of requests and returns only when every
    request has completed. Batches are priced by a channel-bounded latency model:
    ``ceil(batch / channels) * base * size_factor(unit) * (penalty if mixed)``.
    Subclasses only provide page storage.
    """

    def __init__(self, config: DeviceConfig):
        self.config = config
        self._stats = DeviceStats()
        self._allocated = set()
        self._free: List[PageId] = []  # sorted ids below the high-water mark
        self._high_water = 0

    # Storage primitives

    @abstractmethod
    def _load(self, page: PageId) -> bytes:
        """Return the stored bytes of one page (zeros if never written)."""

    @abstractmethod
    def _store(self, page: PageId, data: bytes) -> None:
        """Persist one page."""

    def _sync(self) -> None:
        """Make stored pages durable; no-op for memory-backed devices."""

    def close(self) -> None:
        pass

    # Latency model

    def batch_cost(self, batch_size: int, kind: IoKind, io_unit_pages: int = 1,
                   mixed: bool = False) -> float:
        """Simulated microseconds to complete one psync batch."""
        if batch_size < 1:
            raise UsageError('batch_size must be >= 1')
        kind = IoKind(kind)
        base = self.config.read_latency_us if kind == IoKind.READ else self.config.write_latency_us
        waves = math.ceil(batch_size / self.config.channels)
        cost = waves * base * self.config.size_factor(io_unit_pages)
        if mixed:
            cost *= self.config.interleave_penalty
        return cost

    # psync I/O

    def psync_read(self, pages: Sequence[PageId], io_unit_pages: int = 1) -> List[bytes]:
        """
        Read a batch of pages (or multi-page units) in one blocking call.

        Args:
            pages: page ids; with io_unit_pages > 1 each id is the first page of a unit
            io_unit_pages: pages per request

        Returns:
            Buffers aligned with the request order
        """
        batch = IoBatch([IoRequest(IoKind.READ, p) for p in pages], io_unit_pages)
        return self.psync_submit(batch)

    def psync_write(self, writes: Sequence[Tuple[PageId, bytes]], io_unit_pages: int = 1) -> None:
        """Write a batch of pages; all writes are durable on return."""
        batch = IoBatch([IoRequest(IoKind.WRITE, p, bytes(buf)) for p, buf in writes], io_unit_pages)
        self.psync_submit(batch)

    def psync_submit(self, batch: IoBatch) -> List[Optional[bytes]]:
        """Execute a batch; read results are returned positionally, writes yield None."""
        batch.validate(self.config.max_batch)
        unit = batch.io_unit_pages
        unit_bytes = unit * self.config.page_size

        for req in batch.requests:
            self._check_allocated(req.page, unit)
            if req.kind == IoKind.WRITE and (req.buffer is None or len(req.buffer) != unit_bytes):
                size = None if req.buffer is None else len(req.buffer)
                raise UsageError(f'write buffer of {size} bytes for unit of {unit_bytes} bytes')

        results: List[Optional[bytes]] = []
        reads = writes = 0
        for req in batch.requests:
            if req.kind == IoKind.READ:
                results.append(b''.join(self._load(req.page + i) for i in range(unit)))
                reads += 1
            else:
                for i in range(unit):
                    start = i * self.config.page_size
                    self._store(req.page + i, req.buffer[start:start + self.config.page_size])
                results.append(None)
                writes += 1
        if writes:
            self._sync()

        kinds = batch.kinds
        if len(kinds) > 1:
            cost = self.batch_cost(len(batch.requests), IoKind.WRITE, unit, mixed=True)
        else:
            cost = self.batch_cost(len(batch.requests), next(iter(kinds)), unit, mixed=batch.mixed)

        self._stats.pages_read += reads * unit
        self._stats.pages_written += writes * unit
        self._stats.read_batches += 1 if reads else 0
        self._stats.write_batches += 1 if writes else 0
        self._stats.simulated_time_us += cost
        logger.debug(f'psync batch: {reads} reads, {writes} writes, unit={unit}, cost={cost:.1f}us')
        return results

    def snapshot_pages(self, pages: Iterable[PageId]) -> List[bytes]:
        """Page images without I/O accounting (undo capture)."""
        return [self._load(p) for p in pages]

    def restore_pages(self, images: Sequence[Tuple[PageId, bytes]]) -> None:
        """Write page images back without I/O accounting (undo application)."""
        for page, data in images:
            if len(data) != self.config.page_size:
                raise UsageError(f'restore image of {len(data)} bytes for page {page}')
            self._store(page, data)
        self._sync()

    # Allocation

    def alloc_page(self) -> PageId:
        """Allocate the lowest free page id."""
        if self._free:
            page = self._free.pop(0)
        else:
            if self._high_water >= self.config.page_count:
                raise OutOfSpaceError(f'device full ({self.config.page_count} pages)')
            page = self._high_water
            self._high_water += 1
        self._allocated.add(page)
        return page

    def alloc_extent(self, count: int) -> PageId:
        """Allocate ``count`` consecutive pages at the lowest fitting position."""
        if count == 1:
            return self.alloc_page()
        if count < 1:
            raise UsageError('extent size must be >= 1')
        run_start, run_len = None, 0
        for i, page in enumerate(self._free):
            if run_start is not None and page == self._free[i - 1] + 1:
                run_len += 1
            else:
                run_start, run_len = page, 1
            if run_len == count:
                start_idx = i - count + 1
                del self._free[start_idx:i + 1]
                self._allocated.update(range(run_start, run_start + count))
                return run_start
        if self._high_water + count > self.config.page_count:
            raise OutOfSpaceError(f'no room for an extent of {count} pages')
        start = self._high_water
        self._high_water += count
        self._allocated.update(range(start, start + count))
        return start

    def free_page(self, page: PageId) -> None:
        if page not in self._allocated:
            raise DoubleFreeError(f'page {page} is not allocated')
        self._allocated.remove(page)
        bisect.insort(self._free, page)

    def free_extent(self, start: PageId, count: int) -> None:
        for page in range(start, start + count):
            self.free_page(page)

    def is_allocated(self, page: PageId) -> bool:
        return page in self._allocated

    def reset_allocation(self, pages: Iterable[PageId]) -> None:
        """Replace the allocation map, e.g. with the pages reachable from a tree."""
        self._allocated = set(pages)
        self._high_water = max(self._allocated) + 1 if self._allocated else 0
        self._free = [p for p in range(self._high_water) if p not in self._allocated]
        logger.info(f'allocation map rebuilt: {len(self._allocated)} pages in use')

    @property
    def allocated_count(self) -> int:
        return len(self._allocated)

    def _check_allocated(self, page: PageId, unit: int) -> None:
        for p in range(page, page + unit):
            if p not in self._allocated:
                raise AddressError(f'page {p} is not allocated')

    # Accounting

    def stats(self) -> DeviceStats:
        return self._stats.copy()

    def reset_stats(self) -> None:
        self._stats = DeviceStats()
