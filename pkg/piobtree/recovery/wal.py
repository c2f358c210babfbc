import logging
import os
from typing import List, Optional

from piobtree.exceptions import CorruptLogError, RecoveryError
from piobtree.recovery.models import LogRecord, decode_record, encode_record

logger = logging.getLogger(__name__)


class Wal:
    """
    Append-only write-ahead log.

    ``append`` stages a record in memory; ``force`` makes every staged record durable.
    Without a path the durable image lives in memory, which lets tests keep the log
    across a simulated crash while dropping whatever was not forced.
    """

    def __init__(self, path: Optional[str] = None, sync: bool = True):
        self.path = path
        self.sync = sync
        self._durable = bytearray()
        self._pending: List[bytes] = []
        self.forces = 0
        if path and os.path.exists(path):
            with open(path, 'rb') as f:
                self._durable = bytearray(f.read())
        self.next_lsn = 1
        records = self.read_all()
        if self._valid_end < len(self._durable):
            self.rewrite(records)
        self.next_lsn = records[-1].lsn + 1 if records else 1
        self.durable_lsn = self.next_lsn - 1
        if path:
            logger.info(f'opened log {path}: {len(records)} records, next lsn {self.next_lsn}')

    def append(self, record: LogRecord) -> int:
        """Assign the next lsn and stage the record; returns the lsn."""
        record.lsn = self.next_lsn
        self.next_lsn += 1
        self._pending.append(encode_record(record))
        return record.lsn

    def force(self) -> None:
        """Make staged records durable (fsync for file-backed logs)."""
        if not self._pending:
            return
        data = b''.join(self._pending)
        if self.path:
            try:
                with open(self.path, 'ab') as f:
                    f.write(data)
                    f.flush()
                    if self.sync:
                        os.fsync(f.fileno())
            except OSError as e:
                raise RecoveryError(f'log force to {self.path} failed: {e}') from e
        self._durable.extend(data)
        self._pending.clear()
        self.durable_lsn = self.next_lsn - 1
        self.forces += 1

    def simulate_crash(self) -> None:
        """Lose every record that was appended but not forced."""
        self._pending.clear()
        self.next_lsn = self.durable_lsn + 1

    def read_all(self) -> List[LogRecord]:
        """
        Durable records in lsn order.

        Reading stops at the first frame that fails its checks; a torn or corrupt tail
        is reported and ignored.
        """
        records: List[LogRecord] = []
        offset = 0
        self._valid_end = 0
        data = bytes(self._durable)
        while offset < len(data):
            try:
                record, offset = decode_record(data, offset)
            except CorruptLogError as e:
                logger.warning(f'ignoring log tail after {len(records)} records: {e}')
                break
            records.append(record)
            self._valid_end = offset
        return records

    def rewrite(self, records: List[LogRecord]) -> None:
        """Replace the durable log with ``records`` (lsns kept); pending records are dropped."""
        data = b''.join(encode_record(r) for r in records)
        if self.path:
            tmp = f'{self.path}.tmp'
            with open(tmp, 'wb') as f:
                f.write(data)
                f.flush()
                if self.sync:
                    os.fsync(f.fileno())
            os.replace(tmp, self.path)
        self._durable = bytearray(data)
        self._pending.clear()
        last = records[-1].lsn if records else 0
        self.next_lsn = max(self.next_lsn, last + 1)
        self.durable_lsn = self.next_lsn - 1

    @property
    def size(self) -> int:
        return len(self._durable)

    def raw(self) -> bytes:
        return bytes(self._durable)
