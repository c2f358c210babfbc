"""
Log records of the OPQ write-ahead log.

Each record is framed as::

    u32 magic, u64 lsn, u8 type, u32 payload length, payload, u32 crc32

where the checksum covers the header and the payload. Payload layouts are per type.
"""
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import ClassVar, Dict, Optional, Tuple, Type

from piobtree.exceptions import CorruptLogError
from piobtree.pio.models import OpFlag, OpqEntry

LOG_MAGIC = 0x50494F4C
FRAME_HEADER = struct.Struct('<IQBI')
FRAME_CRC = struct.Struct('<I')

_OP_CODES = {OpFlag.INSERT: 1, OpFlag.DELETE: 2, OpFlag.UPDATE: 3}
_OP_FLAGS = {code: flag for flag, code in _OP_CODES.items()}

# Relation id of the single index the log covers.
DEFAULT_RELATION = 0


class RecordType(IntEnum):
    LOGICAL_REDO = 1
    COMMIT = 2
    ABORT = 3
    FLUSH_START = 4
    FLUSH_UNDO = 5
    FLUSH_END = 6
    CHECKPOINT = 7


@dataclass
class LogRecord:
    kind: ClassVar[RecordType]
    lsn: int

    def payload(self) -> bytes:
        return b''

    @classmethod
    def from_payload(cls, lsn: int, payload: bytes) -> 'LogRecord':
        return cls(lsn)


@dataclass
class LogicalRedo(LogRecord):
    kind: ClassVar[RecordType] = RecordType.LOGICAL_REDO
    txn: int = 0
    entry: Optional[OpqEntry] = None
    relation: int = DEFAULT_RELATION

    LAYOUT: ClassVar[struct.Struct] = struct.Struct('<IQQQB')

    def payload(self) -> bytes:
        return self.LAYOUT.pack(self.relation, self.txn, self.entry.key, self.entry.data_ptr,
                                _OP_CODES[self.entry.op])

    @classmethod
    def from_payload(cls, lsn: int, payload: bytes) -> 'LogicalRedo':
        relation, txn, key, ptr, code = cls.LAYOUT.unpack(payload)
        if code not in _OP_FLAGS:
            raise CorruptLogError(f'lsn {lsn}: bad op code {code}')
        return cls(lsn, txn, OpqEntry(key, ptr, _OP_FLAGS[code]), relation)


@dataclass
class Commit(LogRecord):
    kind: ClassVar[RecordType] = RecordType.COMMIT
    txn: int = 0

    LAYOUT: ClassVar[struct.Struct] = struct.Struct('<Q')

    def payload(self) -> bytes:
        return self.LAYOUT.pack(self.txn)

    @classmethod
    def from_payload(cls, lsn: int, payload: bytes) -> 'Commit':
        return cls(lsn, *cls.LAYOUT.unpack(payload))


@dataclass
class Abort(Commit):
    kind: ClassVar[RecordType] = RecordType.ABORT


@dataclass
class FlushStart(LogRecord):
    kind: ClassVar[RecordType] = RecordType.FLUSH_START
    key_range: Tuple[int, int] = (0, 0)
    relation: int = DEFAULT_RELATION

    LAYOUT: ClassVar[struct.Struct] = struct.Struct('<IQQ')

    def payload(self) -> bytes:
        return self.LAYOUT.pack(self.relation, *self.key_range)

    @classmethod
    def from_payload(cls, lsn: int, payload: bytes) -> 'FlushStart':
        relation, low, high = cls.LAYOUT.unpack(payload)
        return cls(lsn, (low, high), relation)


@dataclass
class FlushEnd(FlushStart):
    kind: ClassVar[RecordType] = RecordType.FLUSH_END


@dataclass
class FlushUndo(LogRecord):
    """Full pre-image of one page about to be overwritten by a flush."""
    kind: ClassVar[RecordType] = RecordType.FLUSH_UNDO
    page: int = 0
    image: bytes = b''
    relation: int = DEFAULT_RELATION

    LAYOUT: ClassVar[struct.Struct] = struct.Struct('<IQ')

    def payload(self) -> bytes:
        return self.LAYOUT.pack(self.relation, self.page) + self.image

    @classmethod
    def from_payload(cls, lsn: int, payload: bytes) -> 'FlushUndo':
        relation, page = cls.LAYOUT.unpack_from(payload, 0)
        return cls(lsn, page, bytes(payload[cls.LAYOUT.size:]), relation)


@dataclass
class Checkpoint(LogRecord):
    kind: ClassVar[RecordType] = RecordType.CHECKPOINT


RECORD_TYPES: Dict[RecordType, Type[LogRecord]] = {
    cls.kind: cls for cls in (LogicalRedo, Commit, Abort, FlushStart, FlushUndo, FlushEnd, Checkpoint)
}


def encode_record(record: LogRecord) -> bytes:
    payload = record.payload()
    header = FRAME_HEADER.pack(LOG_MAGIC, record.lsn, int(record.kind), len(payload))
    return header + payload + FRAME_CRC.pack(zlib.crc32(header + payload))


def decode_record(data: bytes, offset: int) -> Tuple[LogRecord, int]:
    """
    Decode the frame at ``offset``.

    Returns:
        (record, offset of the next frame)

    Raises:
        CorruptLogError: truncated frame, bad magic, unknown type or checksum mismatch
    """
    end = offset + FRAME_HEADER.size
    if end > len(data):
        raise CorruptLogError(f'truncated header at byte {offset}')
    magic, lsn, kind, length = FRAME_HEADER.unpack_from(data, offset)
    if magic != LOG_MAGIC:
        raise CorruptLogError(f'bad magic at byte {offset}')
    frame_end = end + length + FRAME_CRC.size
    if frame_end > len(data):
        raise CorruptLogError(f'truncated record at byte {offset}')
    (crc,) = FRAME_CRC.unpack_from(data, end + length)
    if crc != zlib.crc32(data[offset:end + length]):
        raise CorruptLogError(f'checksum mismatch at byte {offset}')
    try:
        record_type = RECORD_TYPES[RecordType(kind)]
    except ValueError as e:
        raise CorruptLogError(f'unknown record type {kind} at byte {offset}') from e
    try:
        record = record_type.from_payload(lsn, data[end:end + length])
    except struct.error as e:
        raise CorruptLogError(f'malformed {record_type.__name__} payload at byte {offset}') from e
    return record, frame_end
