import logging
from collections import Counter
from typing import Dict, List, Optional, Set, Tuple

from piobtree.device.base import BlockDevice
from piobtree.exceptions import RecoveryError, SimulatedCrash
from piobtree.pio.models import FlushStats, OpqEntry, PioListener
from piobtree.pio.opq import AUTOCOMMIT
from piobtree.pio.pio_tree import PioBTree
from piobtree.recovery.models import (
    Abort, Checkpoint, Commit, FlushEnd, FlushStart, FlushUndo, LogicalRedo, LogRecord,
)
from piobtree.recovery.wal import Wal

logger = logging.getLogger(__name__)

CRASH_POINTS = (
    'before-commit-force',
    'after-commit-force',
    'after-flush-start',
    'before-node-write',
    'after-node-write',
    'before-flush-end',
    'after-flush-end',
)


class CrashInjector:
    """Raises SimulatedCrash on the n-th visit of an armed crash point."""

    def __init__(self, label: Optional[str] = None, occurrence: int = 1):
        self.hits: Counter = Counter()
        self.label = None
        self.occurrence = 1
        if label:
            self.arm(label, occurrence)

    def arm(self, label: str, occurrence: int = 1) -> None:
        if label not in CRASH_POINTS:
            raise ValueError(f'unknown crash point {label!r}')
        self.label, self.occurrence = label, occurrence
        self.hits.clear()

    def disarm(self) -> None:
        self.label = None

    def hit(self, label: str) -> None:
        self.hits[label] += 1
        if label == self.label and self.hits[label] == self.occurrence:
            self.label = None
            raise SimulatedCrash(label)


class RecoveryManager(PioListener):
    """
    Write-ahead logging for a PIO B-tree.

    Every OPQ append is preceded by a logical redo record; a transaction commits when
    its Commit record is forced. A flush is bracketed by forced FlushStart and FlushEnd
    records, and each page is written only after a forced FlushUndo carrying its
    pre-image. Uncommitted entries are never flushed, so recovery needs no
    transaction undo.
    """

    def __init__(self, tree: PioBTree, wal: Wal, crash: Optional[CrashInjector] = None):
        self.tree = tree
        self.wal = wal
        self.crash = crash or CrashInjector()
        tree.listener = self
        self._next_txn = 1
        self._active: Set[int] = set()
        self._flush_start: Optional[int] = None
        self._captured: Set[int] = set()

    # Transactions

    def begin(self) -> int:
        txn = self._next_txn
        self._next_txn += 1
        self._active.add(txn)
        return txn

    def commit(self, txn: int) -> None:
        self._check_active(txn)
        self.wal.append(Commit(0, txn))
        self._force_commit()
        self._active.discard(txn)
        self.tree.commit_txn(txn)

    def abort(self, txn: int) -> None:
        self._check_active(txn)
        self.wal.append(Abort(0, txn))
        self._active.discard(txn)
        self.tree.abort_txn(txn)

    def _check_active(self, txn: int) -> None:
        if txn not in self._active:
            raise RecoveryError(f'transaction {txn} is not active')

    def _force_commit(self) -> None:
        self.crash.hit('before-commit-force')
        self.wal.force()
        self.crash.hit('after-commit-force')

    def insert(self, key: int, data_ptr: int, txn: int = AUTOCOMMIT) -> None:
        self.tree.pio_insert(key, data_ptr, txn)

    def delete(self, key: int, data_ptr: Optional[int] = None, txn: int = AUTOCOMMIT) -> None:
        self.tree.pio_delete(key, data_ptr, txn)

    def update(self, key: int, data_ptr: int, txn: int = AUTOCOMMIT) -> None:
        self.tree.pio_update(key, data_ptr, txn)

    def log_update(self, txn: int, entry: OpqEntry) -> int:
        """Log an OPQ append before it happens; auto-commit records are forced at once."""
        if txn != AUTOCOMMIT:
            self._check_active(txn)
        lsn = self.wal.append(LogicalRedo(0, txn, entry))
        if txn == AUTOCOMMIT:
            self._force_commit()
        return lsn

    # Listener hooks

    def on_append(self, entry: OpqEntry, txn: int) -> None:
        self.log_update(txn, entry)

    def on_flush_start(self, key_range: Tuple[int, int], entries: List[OpqEntry]) -> None:
        self._flush_start = self.wal.append(FlushStart(0, key_range))
        self.wal.force()
        self._captured = set()
        self.crash.hit('after-flush-start')

    def before_write(self, pages: List[int]) -> None:
        fresh = [p for p in pages if p not in self._captured]
        if fresh:
            for page, image in zip(fresh, self.tree.device.snapshot_pages(fresh)):
                self.wal.append(FlushUndo(0, page, image))
            self.wal.force()
            self._captured.update(fresh)
        self.crash.hit('before-node-write')

    def after_write(self, pages: List[int]) -> None:
        self.crash.hit('after-node-write')

    def on_flush_end(self, key_range: Tuple[int, int]) -> None:
        self.crash.hit('before-flush-end')
        self.wal.append(FlushEnd(0, key_range))
        self.wal.force()
        self._flush_start = None
        self.crash.hit('after-flush-end')

    # Flushing

    def flush_with_wal(self) -> Optional[FlushStats]:
        """One logged partial flush of the lowest committed OPQ entries."""
        return self.tree.flush_partial()

    def checkpoint(self) -> int:
        """
        Flush every committed entry, log a Checkpoint and drop the log prefix.

        Redo records of still-open transactions are carried into the new log.

        Returns:
            Number of flushes performed
        """
        flushes = self.tree.force_flush()
        lsn = self.wal.append(Checkpoint(0))
        self.wal.force()
        records = self.wal.read_all()
        kept: List[LogRecord] = [r for r in records
                                 if isinstance(r, LogicalRedo) and r.txn in self._active]
        kept.append(next(r for r in records if r.lsn == lsn))
        kept.sort(key=lambda r: r.lsn)
        self.wal.rewrite(kept)
        logger.info(f'checkpoint at lsn {lsn}: {len(flushes)} flushes, {len(kept)} records kept')
        return len(flushes)

    # Recovery

    @classmethod
    def recover(cls, device: BlockDevice, wal: Wal, buffer_pages: int = 0, flush_mode: str = 'full',
                crash: Optional[CrashInjector] = None) -> 'RecoveryManager':
        """
        Restart after a crash.

        An incomplete flush is undone from its pre-images (newest first) and cut from
        the log. The tree is then reopened and every committed redo record is
        re-appended to the OPQ unless a completed flush that started after both the
        record and its commit covers the record's key.
        """
        wal.simulate_crash()
        records = wal.read_all()

        open_flush: Optional[FlushStart] = None
        undo: List[FlushUndo] = []
        completed: List[Tuple[int, int, int]] = []
        for record in records:
            if isinstance(record, FlushEnd):
                if open_flush is None or open_flush.key_range != record.key_range:
                    raise RecoveryError(f'lsn {record.lsn}: FlushEnd without matching FlushStart')
                completed.append((*open_flush.key_range, open_flush.lsn))
                open_flush, undo = None, []
            elif isinstance(record, FlushStart):
                open_flush, undo = record, []
            elif isinstance(record, FlushUndo):
                undo.append(record)

        if open_flush is not None:
            device.restore_pages([(u.page, u.image) for u in reversed(undo)])
            records = [r for r in records if r.lsn < open_flush.lsn]
            wal.rewrite(records)
            logger.info(f'undid incomplete flush {open_flush.key_range}: {len(undo)} pages restored')

        tree = PioBTree.open(device, buffer_pages, flush_mode)
        manager = cls(tree, wal, crash)
        redo = manager._redo_set(records, completed)
        for entry in redo:
            if tree.opq.is_full:
                manager.flush_with_wal()
            tree.opq.append(entry)
        txns = [r.txn for r in records if isinstance(r, (LogicalRedo, Commit, Abort))]
        manager._next_txn = max(txns, default=0) + 1
        logger.info(f'recovery: {len(redo)} entries redone, {len(completed)} completed flushes seen')
        return manager

    @staticmethod
    def _redo_set(records: List[LogRecord], completed: List[Tuple[int, int, int]]) -> List[OpqEntry]:
        """
        Committed LogicalRedo entries not already applied by a completed flush.

        A record is skipped when its key lies in a completed flush's range and both it
        and its commit precede that flush's FlushStart. Under no-steal a flush only takes
        entries committed before it starts, and the flush runs synchronously, so only its
        own FlushUndo images fall between FlushStart and FlushEnd. Testing against
        FlushStart therefore selects the same records a FlushEnd test would.
        """
        commit_lsn: Dict[int, int] = {r.txn: r.lsn for r in records if isinstance(r, Commit)
                                      and not isinstance(r, Abort)}
        redo = []
        for record in records:
            if not isinstance(record, LogicalRedo):
                continue
            committed_at = record.lsn if record.txn == AUTOCOMMIT else commit_lsn.get(record.txn)
            if committed_at is None:
                continue
            key = record.entry.key
            if any(low <= key <= high and record.lsn < begun and committed_at < begun
                   for low, high, begun in completed):
                continue
            redo.append(record.entry)
        return redo
