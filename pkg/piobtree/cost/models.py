import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

from piobtree.exceptions import CostModelError


class EtaRounding(str, Enum):
    """How the non-buffered height is rounded from eta."""
    CEIL = 'ceil'
    FLOOR = 'floor'


class SearchVariant(str, Enum):
    """Read term of the buffered PIO search cost.

    CANONICAL keeps the buffered B+-tree read structure ``ceil(eta) + (1 - 1/F'^frac)``;
    PRINTED uses ``ceil(eta) - 1/F'^frac``, one page read less.
    """
    CANONICAL = 'canonical'
    PRINTED = 'printed'


@dataclass(frozen=True)
class CostProfile:
    """
    Inputs of the cost formulas.

    Latencies are in microseconds. ``height`` overrides the height derived from
    ``entries`` and the average node fill when given.
    """
    entries: float = 1_000_000
    fanout: int = 256
    utilization: float = 1.0
    leaf_pages: int = 1
    pr: float = 100.0
    pw: float = 200.0
    pr_of_l: Dict[int, float] = field(default_factory=dict)
    pr_batch: float = 100.0
    pw_batch: float = 200.0
    search_ratio: float = 0.5
    insert_ratio: float = 0.5
    buffer_pages: int = 1
    opq_pages: int = 0
    bcnt: int = 5000
    height: Optional[float] = None

    def __post_init__(self):
        if abs(self.search_ratio + self.insert_ratio - 1.0) > 1e-9:
            raise CostModelError('search and insert ratios must sum to 1')
        if not 0 <= self.insert_ratio <= 1:
            raise CostModelError(f'insert ratio {self.insert_ratio} outside [0, 1]')
        if self.avg_entries < 2:
            raise CostModelError(f"average node entries F'={self.avg_entries:.3f} must be >= 2")
        latencies = [self.pr, self.pw, self.pr_batch, self.pw_batch, *self.pr_of_l.values()]
        if any(v <= 0 for v in latencies):
            raise CostModelError('latencies must be positive')
        if self.entries < 1:
            raise CostModelError('entries must be >= 1')
        if self.leaf_pages < 1 or self.bcnt < 1:
            raise CostModelError('leaf_pages and bcnt must be >= 1')
        if self.opq_pages < 0 or self.buffer_pages <= self.opq_pages:
            raise CostModelError(f'buffer pages {self.buffer_pages} must exceed OPQ pages {self.opq_pages}')

    @property
    def avg_entries(self) -> float:
        """F' = (F - 1) * U."""
        return (self.fanout - 1) * self.utilization

    def leaf_read(self, leaf_pages: Optional[int] = None) -> float:
        """Pr(L); falls back to Pr for sizes that were not calibrated."""
        return self.pr_of_l.get(leaf_pages or self.leaf_pages, self.pr)

    def evolve(self, **changes) -> 'CostProfile':
        return replace(self, **changes)


@dataclass(frozen=True)
class BufferGeometry:
    """Buffered and non-buffered heights of a tree whose top levels are cached."""
    last_level: float
    buffered_height: float
    non_buffered_height: int
    coverage: float
    eta: float

    @property
    def fully_buffered(self) -> bool:
        return self.eta <= 0


@dataclass(frozen=True)
class Calibration:
    """Latencies measured by the calibration micro-benchmark."""
    pr: float
    pw: float
    pr_batch: float
    pw_batch: float
    pr_of_l: Dict[int, float]
    channels: int
    pio_max: int

    def profile(self, **fields) -> CostProfile:
        return CostProfile(pr=self.pr, pw=self.pw, pr_batch=self.pr_batch, pw_batch=self.pw_batch,
                           pr_of_l=dict(self.pr_of_l), **fields)

    def describe(self) -> List[Tuple[str, float]]:
        rows = [('Pr', self.pr), ('Pw', self.pw), ("Pr'", self.pr_batch), ("Pw'", self.pw_batch)]
        rows.extend((f'Pr({size})', value) for size, value in sorted(self.pr_of_l.items()))
        return rows


@dataclass(frozen=True)
class TuningResult:
    leaf_pages: int
    opq_pages: int
    pio_cost: float
    node_pages: int
    bplus_cost: float
    grid: List[Tuple[int, int, float]] = field(default_factory=list)


def snap(value: float, tolerance: float = 1e-9) -> float:
    """Round values within ``tolerance`` of an integer onto it."""
    nearest = round(value)
    return float(nearest) if abs(value - nearest) < tolerance else value


def round_eta(eta: float, rounding: EtaRounding) -> int:
    return math.ceil(eta) if EtaRounding(rounding) == EtaRounding.CEIL else math.floor(eta)
