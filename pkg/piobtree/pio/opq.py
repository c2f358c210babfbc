import bisect
import logging
from dataclasses import dataclass
from typing import List

from piobtree.pio.models import OpqEntry

logger = logging.getLogger(__name__)

AUTOCOMMIT = 0


@dataclass
class QueuedEntry:
    entry: OpqEntry
    seq: int
    txn: int = AUTOCOMMIT

    @property
    def committed(self) -> bool:
        return self.txn == AUTOCOMMIT


def _key(slot: QueuedEntry) -> int:
    return slot.entry.key


class OpQueue:
    """
    Operation Queue: an in-memory array of tagged index records.

    ``entries[:sorted_offset]`` is sorted by key; later appends form an unsorted tail
    that is sorted and merged in every ``speriod`` appends (and before each flush).
    Equal keys keep their append order.
    """

    def __init__(self, capacity: int, speriod: int):
        self.capacity = capacity
        self.speriod = speriod
        self._slots: List[QueuedEntry] = []
        self.sorted_offset = 0
        self.appended_since_sort = 0
        self._seq = 0

    def __len__(self) -> int:
        return len(self._slots)

    @property
    def is_full(self) -> bool:
        return len(self._slots) >= self.capacity

    @property
    def entries(self) -> List[OpqEntry]:
        return [slot.entry for slot in self._slots]

    def append(self, entry: OpqEntry, txn: int = AUTOCOMMIT) -> None:
        self._seq += 1
        self._slots.append(QueuedEntry(entry, self._seq, txn))
        self.appended_since_sort += 1
        if self.appended_since_sort >= self.speriod:
            self.sort_merge()

    def sort_merge(self) -> None:
        """Sort the tail and merge it into the sorted region (stable by append order)."""
        if self.sorted_offset < len(self._slots):
            tail = sorted(self._slots[self.sorted_offset:], key=_key)
            head = self._slots[:self.sorted_offset]
            merged = []
            i = j = 0
            while i < len(head) and j < len(tail):
                if _key(tail[j]) < _key(head[i]):
                    merged.append(tail[j])
                    j += 1
                else:
                    merged.append(head[i])
                    i += 1
            merged.extend(head[i:])
            merged.extend(tail[j:])
            self._slots = merged
        self.sorted_offset = len(self._slots)
        self.appended_since_sort = 0

    def search(self, key: int) -> List[OpqEntry]:
        """Entries for ``key`` in append order: binary search on the sorted region,
        linear scan over the tail."""
        lo = bisect.bisect_left(self._slots, key, 0, self.sorted_offset, key=_key)
        hits = []
        for slot in self._slots[lo:self.sorted_offset]:
            if slot.entry.key != key:
                break
            hits.append(slot)
        hits.extend(s for s in self._slots[self.sorted_offset:] if s.entry.key == key)
        hits.sort(key=lambda s: s.seq)
        return [s.entry for s in hits]

    def range(self, start: int, end: int) -> List[OpqEntry]:
        """Entries with start <= key < end in append order."""
        lo = bisect.bisect_left(self._slots, start, 0, self.sorted_offset, key=_key)
        hi = bisect.bisect_left(self._slots, end, lo, self.sorted_offset, key=_key)
        hits = self._slots[lo:hi]
        hits += [s for s in self._slots[self.sorted_offset:] if start <= s.entry.key < end]
        hits.sort(key=lambda s: s.seq)
        return [s.entry for s in hits]

    def take_lowest(self, limit: int) -> List[QueuedEntry]:
        """
        Select up to ``limit`` committed entries with the lowest keys for a flush.

        The selection is a run of whole key groups: a key's entries never straddle two
        flushes, and a key holding uncommitted entries ends the run. A single key group
        larger than ``limit`` is taken whole.
        """
        self.sort_merge()
        selected: List[QueuedEntry] = []
        i = 0
        while i < len(self._slots):
            j = i
            key = _key(self._slots[i])
            while j < len(self._slots) and _key(self._slots[j]) == key:
                j += 1
            group = self._slots[i:j]
            i = j
            if not all(s.committed for s in group):
                if selected:
                    break
                continue
            if selected and len(selected) + len(group) > limit:
                break
            selected.extend(group)
            if len(selected) >= limit:
                break
        return selected

    def remove(self, slots: List[QueuedEntry]) -> None:
        gone = {s.seq for s in slots}
        before_sorted = sum(1 for s in self._slots[:self.sorted_offset] if s.seq in gone)
        self._slots = [s for s in self._slots if s.seq not in gone]
        self.sorted_offset -= before_sorted

    def commit(self, txn: int) -> int:
        """Mark every entry of ``txn`` committed; returns how many."""
        count = 0
        for slot in self._slots:
            if slot.txn == txn:
                slot.txn = AUTOCOMMIT
                count += 1
        return count

    def abort(self, txn: int) -> int:
        """Drop every entry of ``txn``; returns how many."""
        doomed = [s for s in self._slots if s.txn == txn]
        self.remove(doomed)
        return len(doomed)

    def has_committed(self) -> bool:
        return any(s.committed for s in self._slots)

    def clear(self) -> None:
        self._slots = []
        self.sorted_offset = 0
        self.appended_since_sort = 0
