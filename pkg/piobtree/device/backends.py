import logging
import os
from typing import Dict

from piobtree.device.base import BlockDevice
from piobtree.device.models import DeviceConfig, PageId

logger = logging.getLogger(__name__)


class EmulatedFlashDevice(BlockDevice):
    """Memory-backed flash SSD emulator; time is the logical latency-model clock."""

    def __init__(self, config: DeviceConfig = None):
        super().__init__(config or DeviceConfig())
        self._pages: Dict[PageId, bytes] = {}
        self._zero = bytes(self.config.page_size)
        logger.info(f'emulated device: {self.config.channels} channels, '
                    f'Pr={self.config.read_latency_us}us, Pw={self.config.write_latency_us}us')

    def _load(self, page: PageId) -> bytes:
        return self._pages.get(page, self._zero)

    def _store(self, page: PageId, data: bytes) -> None:
        self._pages[page] = bytes(data)


class FileDevice(BlockDevice):
    """Single data file, page ``i`` at byte offset ``i * page_size``.

    Latency accounting uses the same model as the emulator so the two backends
    report comparable simulated time.
    """

    def __init__(self, path: str, config: DeviceConfig = None, sync: bool = True):
        super().__init__(config or DeviceConfig())
        self.path = path
        self.sync = sync
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        mode = 'r+b' if os.path.exists(path) else 'w+b'
        self._fh = open(path, mode)
        logger.info(f'file device at {path} ({mode})')

    def _load(self, page: PageId) -> bytes:
        size = self.config.page_size
        self._fh.seek(page * size)
        data = self._fh.read(size)
        if len(data) < size:
            data += bytes(size - len(data))
        return data

    def _store(self, page: PageId, data: bytes) -> None:
        self._fh.seek(page * self.config.page_size)
        self._fh.write(data)

    def _sync(self) -> None:
        self._fh.flush()
        if self.sync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()
