from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Dict, List, Optional

from dotenv import dotenv_values

from piobtree.config import Config
from piobtree.exceptions import ConfigError, UsageError

# Page ids are plain non-negative ints; page 0 is reserved for tree superblocks.
PageId = int

# Latency scale per I/O unit size in pages (sub-linear growth with size).
DEFAULT_SIZE_LATENCY_CURVE: Dict[int, float] = {1: 1.0, 2: 1.0, 4: 1.6, 8: 2.5}


class IoKind(str, Enum):
    READ = 'read'
    WRITE = 'write'


@dataclass(frozen=True)
class IoRequest:
    """One page (or one multi-page unit) read or write."""
    kind: IoKind
    page: PageId
    buffer: Optional[bytes] = None


@dataclass
class IoBatch:
    """An ordered group of requests submitted and completed as a unit."""
    requests: List[IoRequest]
    io_unit_pages: int = 1
    mixed: bool = False

    @property
    def kinds(self) -> set:
        return {req.kind for req in self.requests}

    def validate(self, max_batch: int) -> None:
        if not self.requests:
            raise UsageError('empty I/O batch')
        if len(self.requests) > max_batch:
            raise UsageError(f'batch of {len(self.requests)} exceeds max batch {max_batch}')
        if self.io_unit_pages < 1:
            raise UsageError(f'invalid I/O unit {self.io_unit_pages}')
        if len(self.kinds) > 1 and not self.mixed:
            raise UsageError('mixed read/write batch not flagged as mixed')


@dataclass
class DeviceConfig:
    """Geometry and latency parameters of a block device."""
    page_size: int = 4096
    page_count: int = 4 * 1024 * 1024
    channels: int = 16
    packages_per_channel: int = 4
    read_latency_us: float = 100.0
    write_latency_us: float = 200.0
    size_latency_curve: Dict[int, float] = field(
        default_factory=lambda: dict(DEFAULT_SIZE_LATENCY_CURVE))
    interleave_penalty: float = 1.3
    max_batch: int = 4096

    def __post_init__(self):
        if self.page_size < 64:
            raise ConfigError(f'page_size {self.page_size} too small')
        if self.page_count < 2:
            raise ConfigError('page_count must be at least 2')
        if self.channels < 1 or self.packages_per_channel < 1:
            raise ConfigError('channels and packages_per_channel must be >= 1')
        if self.interleave_penalty < 1:
            raise ConfigError('interleave_penalty must be >= 1')
        if self.read_latency_us <= 0 or self.write_latency_us <= 0:
            raise ConfigError('latencies must be positive')
        if self.max_batch < 1:
            raise ConfigError('max_batch must be >= 1')
        if not self.size_latency_curve:
            raise ConfigError('size_latency_curve must not be empty')
        sizes = sorted(self.size_latency_curve)
        if sizes[0] < 1:
            raise ConfigError('size_latency_curve sizes must be >= 1')
        factors = [self.size_latency_curve[s] for s in sizes]
        if any(b < a for a, b in zip(factors, factors[1:])):
            raise ConfigError('size_latency_curve must be non-decreasing in size')

    def size_factor(self, io_unit_pages: int) -> float:
        """Latency scale for an I/O unit; sizes missing from the table scale linearly
        from the nearest smaller entry."""
        if io_unit_pages in self.size_latency_curve:
            return self.size_latency_curve[io_unit_pages]
        smaller = [s for s in self.size_latency_curve if s < io_unit_pages]
        if not smaller:
            base = min(self.size_latency_curve)
            return self.size_latency_curve[base]
        anchor = max(smaller)
        return self.size_latency_curve[anchor] * io_unit_pages / anchor

    def with_overrides(self, **overrides) -> 'DeviceConfig':
        known = {f.name for f in fields(self)}
        clean = {k: v for k, v in overrides.items() if v is not None and k in known}
        return replace(self, **clean)

    @classmethod
    def from_config(cls, **overrides) -> 'DeviceConfig':
        """Build from the environment-backed Config plus explicit overrides."""
        base = cls(
            page_size=Config.PAGE_SIZE,
            page_count=Config.PAGE_COUNT,
            channels=Config.CHANNELS,
            read_latency_us=Config.READ_LATENCY_US,
            write_latency_us=Config.WRITE_LATENCY_US,
            interleave_penalty=Config.INTERLEAVE_PENALTY,
        )
        return base.with_overrides(**overrides)

    @classmethod
    def from_file(cls, path: str) -> 'DeviceConfig':
        """
        Load a plain key=value device description.

        Args:
            path: file with lines such as ``CHANNELS=16`` or
                ``SIZE_LATENCY_CURVE=1:1.0,2:1.0,4:1.6,8:2.5``

        Returns:
            DeviceConfig with unspecified fields at their defaults
        """
        raw = dotenv_values(path)
        casts = {
            'page_size': int,
            'page_count': int,
            'channels': int,
            'packages_per_channel': int,
            'read_latency_us': float,
            'write_latency_us': float,
            'interleave_penalty': float,
            'max_batch': int,
            'size_latency_curve': parse_size_curve,
        }
        values = {}
        for key, value in raw.items():
            name = key.strip().lower()
            if name not in casts:
                raise ConfigError(f'unknown device config key {key!r} in {path}')
            if value is None:
                raise ConfigError(f'device config key {key!r} has no value')
            try:
                values[name] = casts[name](value)
            except ValueError as e:
                raise ConfigError(f'bad value for {key!r}: {value!r}') from e
        return cls(**values)


def parse_size_curve(text: str) -> Dict[int, float]:
    """Parse ``1:1.0,2:1.0,4:1.6`` into ``{1: 1.0, 2: 1.0, 4: 1.6}``."""
    curve = {}
    for item in text.split(','):
        item = item.strip()
        if not item:
            continue
        size, factor = item.split(':')
        curve[int(size)] = float(factor)
    if not curve:
        raise ValueError('empty size curve')
    return curve


@dataclass
class DeviceStats:
    """Cumulative I/O accounting."""
    pages_read: int = 0
    pages_written: int = 0
    read_batches: int = 0
    write_batches: int = 0
    simulated_time_us: float = 0.0

    def copy(self) -> 'DeviceStats':
        return replace(self)

    def delta(self, earlier: 'DeviceStats') -> 'DeviceStats':
        return DeviceStats(
            pages_read=self.pages_read - earlier.pages_read,
            pages_written=self.pages_written - earlier.pages_written,
            read_batches=self.read_batches - earlier.read_batches,
            write_batches=self.write_batches - earlier.write_batches,
            simulated_time_us=self.simulated_time_us - earlier.simulated_time_us,
        )
