import logging
from typing import Dict, Iterable, List, Tuple

import numpy as np

from piobtree.bench.models import TraceRecord, WorkloadKind, WorkloadSpec
from piobtree.exceptions import ConfigError

logger = logging.getLogger(__name__)


def data_ptr_for(key: int, version: int = 0) -> int:
    """Deterministic record pointer; ``version`` distinguishes updated pointers."""
    return key * 8 + version % 8 + 1


class LiveKeys:
    """Keys currently present, with O(1) random choice and removal."""

    def __init__(self, keys: Iterable[int] = ()):
        self._keys: List[int] = list(keys)
        self._pos: Dict[int, int] = {k: i for i, k in enumerate(self._keys)}

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, key: int) -> bool:
        return key in self._pos

    def add(self, key: int) -> None:
        self._pos[key] = len(self._keys)
        self._keys.append(key)

    def remove(self, key: int) -> None:
        i = self._pos.pop(key)
        last = self._keys.pop()
        if i < len(self._keys):
            self._keys[i] = last
            self._pos[last] = i

    def pick(self, rng: np.random.Generator) -> int:
        return self._keys[int(rng.integers(len(self._keys)))]


def preload_records(spec: WorkloadSpec) -> List[Tuple[int, int]]:
    """Sorted (key, ptr) pairs bulk-loaded before the workload runs."""
    rng = np.random.default_rng(spec.seed)
    keys = np.sort(rng.choice(spec.key_domain, size=spec.preload, replace=False))
    return [(int(k), data_ptr_for(int(k))) for k in keys]


def generate(spec: WorkloadSpec) -> List[TraceRecord]:
    """
    Reproducible operation stream for ``spec``.

    Inserts draw keys that are absent at that point of the stream, deletes and updates
    target present keys, searches draw any key of the domain. Range workloads emit
    ``ranges_per_size`` half-open ranges per size.
    """
    rng = np.random.default_rng(spec.seed + 1)
    if spec.kind == WorkloadKind.RANGE:
        trace = []
        for size in spec.range_sizes:
            starts = rng.integers(0, spec.key_domain - size + 1, size=spec.ranges_per_size)
            trace.extend(TraceRecord('r', int(s), key2=int(s) + size) for s in starts)
        return trace

    live = LiveKeys(k for k, _ in preload_records(spec))
    versions: Dict[int, int] = {}
    if spec.kind == WorkloadKind.SEARCH:
        thresholds = (0.0, 0.0, 0.0)
    elif spec.kind == WorkloadKind.INSERT:
        thresholds = (1.0, 1.0, 1.0)
    else:
        i = spec.insert_ratio
        d = i + spec.delete_ratio
        thresholds = (i, d, d + spec.update_ratio)

    trace: List[TraceRecord] = []
    draws = rng.random(spec.op_count)
    for draw in draws:
        if draw < thresholds[0]:
            op = 'i'
        elif draw < thresholds[1]:
            op = 'd'
        elif draw < thresholds[2]:
            op = 'u'
        else:
            op = 's'
        if op in ('d', 'u') and not live:
            op = 'i'
        if op == 'i' and len(live) >= spec.key_domain:
            op = 's'

        if op == 'i':
            key = int(rng.integers(spec.key_domain))
            while key in live:
                key = int(rng.integers(spec.key_domain))
            live.add(key)
            versions[key] = versions.get(key, 0) + 1
            trace.append(TraceRecord('i', key, ptr=data_ptr_for(key, versions[key])))
        elif op == 'd':
            key = live.pick(rng)
            live.remove(key)
            trace.append(TraceRecord('d', key))
        elif op == 'u':
            key = live.pick(rng)
            versions[key] = versions.get(key, 0) + 1
            trace.append(TraceRecord('u', key, ptr=data_ptr_for(key, versions[key])))
        else:
            trace.append(TraceRecord('s', int(rng.integers(spec.key_domain))))
    logger.debug(f'generated {len(trace)} {spec.kind.value} operations (seed {spec.seed})')
    return trace


def write_trace(path: str, trace: Iterable[TraceRecord]) -> int:
    count = 0
    with open(path, 'w') as f:
        for record in trace:
            f.write(record.to_line() + '\n')
            count += 1
    return count


def read_trace(path: str) -> List[TraceRecord]:
    """Parse a trace file; blank lines and ``#`` comments are skipped."""
    trace = []
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if line and not line.startswith('#'):
                    trace.append(TraceRecord.parse(line, lineno))
    except OSError as e:
        raise ConfigError(f'cannot read trace {path}: {e}') from e
    return trace
