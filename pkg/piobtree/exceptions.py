class PioBTreeError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(PioBTreeError):
    """Invalid configuration value or config file."""


class DeviceError(PioBTreeError):
    """Base class for block-device errors."""


class AddressError(DeviceError):
    """Page id outside the allocated set."""


class UsageError(DeviceError):
    """Malformed I/O call: empty batch, wrong buffer size, oversized batch."""


class OutOfSpaceError(DeviceError):
    """No free pages left on the device."""


class DoubleFreeError(DeviceError):
    """Freeing a page that is not allocated."""


class TreeError(PioBTreeError):
    """Base class for index structure errors."""


class DuplicateKeyError(TreeError):
    """Insert of a key that is already present."""


class UnsortedInputError(TreeError):
    """Bulk-load input that is not strictly ascending."""


class CorruptPageError(TreeError):
    """A page that does not decode as the expected node type."""


class LsMapRangeError(PioBTreeError):
    """Last-LS id outside the range the LSMap can encode."""


class CostModelError(PioBTreeError):
    """Cost-model input outside the formula's domain."""


class RecoveryError(PioBTreeError):
    """Write-ahead log or recovery failure."""


class CorruptLogError(RecoveryError):
    """A log record failed its checksum or framing check."""


class VerificationError(PioBTreeError):
    """An index answer disagreed with the shadow oracle."""

    def __init__(self, op: str, key: int, expected, actual):
        self.op = op
        self.key = key
        self.expected = expected
        self.actual = actual
        super().__init__(f'{op} mismatch at key {key}: expected {expected!r}, got {actual!r}')


class SimulatedCrash(Exception):
    """Raised by an armed crash point. Library code never catches it."""

    def __init__(self, label: str):
        self.label = label
        super().__init__(f'simulated crash at {label}')
