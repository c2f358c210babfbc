from .models import (
    DEFAULT_SIZE_LATENCY_CURVE, DeviceConfig, DeviceStats, IoBatch, IoKind, IoRequest, PageId,
)
from .base import BlockDevice
from .backends import EmulatedFlashDevice, FileDevice
