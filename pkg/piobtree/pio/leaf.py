"""Logical view of append-only leaves: per-key chronological folding and shrink."""
from collections import defaultdict
from typing import Dict, Iterable, List, Optional, Tuple

from piobtree.btree.models import IndexRecord
from piobtree.pio.models import WILDCARD_PTR, OpFlag, OpqEntry, PioLeafNode


def fold(entries: Iterable[OpqEntry], initial: Optional[int] = None) -> Optional[int]:
    """
    Apply one key's entries in chronological order.

    An insert only takes effect on an absent key, a delete cancels the live record when
    its pointer matches (or is the wildcard) and an update replaces the pointer of a
    live record.

    Returns:
        The surviving data pointer, or None when no insert survives
    """
    state = initial
    for entry in entries:
        if entry.op == OpFlag.INSERT:
            if state is None:
                state = entry.data_ptr
        elif entry.op == OpFlag.DELETE:
            if state is not None and entry.data_ptr in (WILDCARD_PTR, state):
                state = None
        elif state is not None:
            state = entry.data_ptr
    return state


def group_by_key(entries: Iterable[OpqEntry]) -> Dict[int, List[OpqEntry]]:
    groups: Dict[int, List[OpqEntry]] = defaultdict(list)
    for entry in entries:
        groups[entry.key].append(entry)
    return groups


def shrink(entries: Iterable[OpqEntry]) -> List[Tuple[int, int]]:
    """Cancel matching insert/delete pairs and fold updates; survivors sorted by key."""
    survivors = []
    for key, history in group_by_key(entries).items():
        ptr = fold(history)
        if ptr is not None:
            survivors.append((key, ptr))
    survivors.sort()
    return survivors


def leaf_lookup(leaf: PioLeafNode, key: int) -> List[OpqEntry]:
    return [e for e in leaf.entries if e.key == key]


def merged_records(leaf_entries: Iterable[OpqEntry], queued: Iterable[OpqEntry],
                   start: int, end: int) -> List[IndexRecord]:
    """Records in [start, end) after replaying queued entries on top of the leaf view."""
    history = group_by_key(e for e in leaf_entries if start <= e.key < end)
    for entry in queued:
        if start <= entry.key < end:
            history[entry.key].append(entry)
    records = []
    for key in sorted(history):
        ptr = fold(history[key])
        if ptr is not None:
            records.append(IndexRecord(key, ptr))
    return records
