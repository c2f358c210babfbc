import logging
from typing import Optional

from piobtree.config import Config

__version__ = '0.1.0'

_configured = False


def configure_logging(level: Optional[str] = None) -> logging.Logger:
    """Configure package logging once and return the package logger."""
    global _configured
    level_name = (level or Config.LOG_LEVEL).upper()
    if not _configured:
        logging.basicConfig(
            level=logging.WARNING,
            format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        )
        _configured = True

    logger = logging.getLogger('piobtree')
    logger.setLevel(getattr(logging, level_name, logging.INFO))
    return logger


def create_device(kind: str = 'emu', path: Optional[str] = None, config=None, **overrides):
    """
    Create a block device.

    Args:
        kind: 'emu' for the in-memory flash emulator, 'file' for a data file
        path: data file for the 'file' backend
        config: DeviceConfig to start from; Config defaults when omitted
        **overrides: DeviceConfig fields to replace (None values are ignored)

    Returns:
        An open BlockDevice
    """
    from piobtree.device import DeviceConfig, EmulatedFlashDevice, FileDevice
    from piobtree.exceptions import ConfigError

    device_config = (config or DeviceConfig.from_config()).with_overrides(**overrides)
    if kind == 'emu':
        return EmulatedFlashDevice(device_config)
    if kind == 'file':
        if not path:
            raise ConfigError('the file device needs a path')
        return FileDevice(path, device_config)
    raise ConfigError(f"unknown device kind {kind!r}; expected 'emu' or 'file'")
