from .models import (
    Abort, Checkpoint, Commit, FlushEnd, FlushStart, FlushUndo, LogicalRedo, LogRecord, RecordType,
    decode_record, encode_record,
)
from .wal import Wal
from .manager import CRASH_POINTS, CrashInjector, RecoveryManager
