from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, NamedTuple, Optional, Tuple

from piobtree.config import Config
from piobtree.exceptions import ConfigError

OPS = ('s', 'i', 'd', 'u', 'r')


class WorkloadKind(str, Enum):
    SEARCH = 'search'
    INSERT = 'insert'
    MIXED = 'mixed'
    RANGE = 'range'


@dataclass(frozen=True)
class WorkloadSpec:
    """A reproducible operation stream over ``[0, key_domain)`` after a bulk load of
    ``preload`` keys."""
    kind: WorkloadKind = WorkloadKind.MIXED
    op_count: int = 100_000
    key_domain: int = 1_000_000
    preload: int = 100_000
    insert_ratio: float = 0.5
    delete_ratio: float = 0.0
    update_ratio: float = 0.0
    range_sizes: Tuple[int, ...] = (2 ** 4, 2 ** 7, 2 ** 10, 2 ** 13)
    ranges_per_size: int = 100
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, 'kind', WorkloadKind(self.kind))
        ratios = (self.insert_ratio, self.delete_ratio, self.update_ratio)
        if any(r < 0 or r > 1 for r in ratios) or sum(ratios) > 1 + 1e-9:
            raise ConfigError(f'invalid operation ratios {ratios}')
        if self.op_count < 0 or self.preload < 0 or self.key_domain < 1:
            raise ConfigError('op_count, preload and key_domain must be non-negative')
        if self.preload > self.key_domain:
            raise ConfigError(f'cannot preload {self.preload} keys from a domain of {self.key_domain}')
        if any(size < 1 or size > self.key_domain for size in self.range_sizes):
            raise ConfigError(f'range sizes {self.range_sizes} must lie in [1, {self.key_domain}]')


class TraceRecord(NamedTuple):
    """One trace line: ``<op> <key> [<key2>|<ptr>]``; r carries key2, i/u/d a pointer."""
    op: str
    key: int
    key2: Optional[int] = None
    ptr: Optional[int] = None

    def to_line(self) -> str:
        extra = self.key2 if self.op == 'r' else self.ptr
        return f'{self.op} {self.key}' if extra is None else f'{self.op} {self.key} {extra}'

    @classmethod
    def parse(cls, line: str, lineno: int = 0) -> 'TraceRecord':
        parts = line.split()
        if len(parts) not in (2, 3) or parts[0] not in OPS:
            raise ConfigError(f'trace line {lineno}: cannot parse {line!r}')
        try:
            numbers = [int(p) for p in parts[1:]]
        except ValueError as e:
            raise ConfigError(f'trace line {lineno}: non-integer field in {line!r}') from e
        op, key = parts[0], numbers[0]
        extra = numbers[1] if len(numbers) == 2 else None
        if op == 'r':
            if extra is None or extra < key:
                raise ConfigError(f'trace line {lineno}: range needs key <= key2')
            return cls(op, key, key2=extra)
        if op == 's' and extra is not None:
            raise ConfigError(f'trace line {lineno}: search takes a single key')
        return cls(op, key, ptr=extra)


@dataclass
class BenchParams:
    """Index and device knobs of one run; defaults follow Config."""
    page_size: int = Config.PAGE_SIZE
    channels: int = Config.CHANNELS
    leaf_segments: int = Config.LEAF_SEGMENTS
    opq_pages: int = Config.OPQ_PAGES
    pio_max: int = Config.PIO_MAX
    speriod: int = Config.SPERIOD
    bcnt: int = Config.BCNT
    buffer_pages: int = Config.BUFFER_PAGES
    fanout: int = 0
    ls_capacity: int = 0
    node_pages: int = 1
    fill_factor: float = 1.0
    flush_mode: str = 'full'
    # baseline pool policy; write-through prices every update at one page write
    write_back: bool = True
    device: str = 'emu'
    path: Optional[str] = None
    device_config: Optional[str] = None

    @property
    def pio_pool_pages(self) -> int:
        """The OPQ takes its pages from the memory budget."""
        return max(self.buffer_pages - self.opq_pages, 0)

    def as_dict(self) -> Dict:
        return {k: v for k, v in asdict(self).items() if k != 'path'}


@dataclass
class RunReport:
    """Metrics of one replayed workload on one index."""
    experiment: str
    index: str
    ops: int = 0
    op_counts: Dict[str, int] = field(default_factory=dict)
    wall_time_s: float = 0.0
    simulated_time_us: float = 0.0
    pages_read: int = 0
    pages_written: int = 0
    read_batches: int = 0
    write_batches: int = 0
    config: Dict = field(default_factory=dict)

    @property
    def avg_latency_us(self) -> float:
        return self.simulated_time_us / self.ops if self.ops else 0.0

    @property
    def ops_per_sec(self) -> float:
        return self.ops / (self.simulated_time_us / 1e6) if self.simulated_time_us else 0.0

    def as_row(self) -> Dict:
        row = {'experiment': self.experiment, 'index': self.index}
        row.update(self.config)
        row.update({
            'ops': self.ops,
            **{f'ops_{op}': self.op_counts.get(op, 0) for op in OPS},
            'simulated_time_us': round(self.simulated_time_us, 3),
            'avg_latency_us': round(self.avg_latency_us, 3),
            'ops_per_sec': round(self.ops_per_sec, 3),
            'pages_read': self.pages_read,
            'pages_written': self.pages_written,
            'read_batches': self.read_batches,
            'write_batches': self.write_batches,
            'wall_time_s': round(self.wall_time_s, 4),
        })
        return row
