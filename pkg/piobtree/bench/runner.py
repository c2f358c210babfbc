import bisect
import logging
import math
import time
from collections import Counter
from dataclasses import replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd

from piobtree import create_device
from piobtree.bench.models import BenchParams, RunReport, TraceRecord, WorkloadKind, WorkloadSpec
from piobtree.bench.workload import data_ptr_for, generate, preload_records
from piobtree.btree.bplus_tree import BPlusTree
from piobtree.cost.formulas import predict_latency
from piobtree.cost.tuning import calibrate
from piobtree.device.base import BlockDevice
from piobtree.device.models import DeviceConfig
from piobtree.exceptions import ConfigError, VerificationError
from piobtree.pio.models import PioConfig
from piobtree.pio.pio_tree import PioBTree

logger = logging.getLogger(__name__)

INDEXES = ('bplus', 'pio')


class ShadowOracle:
    """Reference sorted map replaying the same operations as the index under test."""

    def __init__(self, records: Iterable[Tuple[int, int]] = ()):
        self._map: Dict[int, int] = dict(records)
        self._keys: List[int] = sorted(self._map)

    def __len__(self) -> int:
        return len(self._map)

    def apply(self, record: TraceRecord) -> None:
        key = record.key
        if record.op == 'i':
            if key not in self._map:
                bisect.insort(self._keys, key)
                self._map[key] = record.ptr if record.ptr is not None else data_ptr_for(key)
        elif record.op == 'd':
            if key in self._map and record.ptr in (None, self._map[key]):
                del self._map[key]
                del self._keys[bisect.bisect_left(self._keys, key)]
        elif record.op == 'u':
            if key in self._map:
                self._map[key] = record.ptr

    def search(self, key: int) -> Optional[int]:
        return self._map.get(key)

    def range(self, start: int, end: int) -> List[Tuple[int, int]]:
        lo = bisect.bisect_left(self._keys, start)
        hi = bisect.bisect_left(self._keys, end)
        return [(k, self._map[k]) for k in self._keys[lo:hi]]

    def items(self) -> List[Tuple[int, int]]:
        return [(k, self._map[k]) for k in self._keys]


class BaselineHandle:
    name = 'bplus'

    def __init__(self, tree: BPlusTree):
        self.tree = tree

    def search(self, key: int) -> Optional[int]:
        return self.tree.search(key)

    def insert(self, key: int, ptr: int) -> None:
        self.tree.insert(key, ptr)

    def delete(self, key: int, ptr: Optional[int]) -> None:
        if ptr is None or self.tree.search(key) == ptr:
            self.tree.delete(key)

    def update(self, key: int, ptr: int) -> None:
        self.tree.update(key, ptr)

    def range(self, start: int, end: int) -> List[Tuple[int, int]]:
        return [tuple(r) for r in self.tree.range_search_legacy(start, end)]

    def finish(self) -> None:
        self.tree.buffer_flush_all()

    def audit(self) -> int:
        return self.tree.audit()


class PioHandle:
    name = 'pio'

    def __init__(self, tree: PioBTree, range_mode: str = 'prange'):
        if range_mode not in ('prange', 'legacy'):
            raise ConfigError(f"range mode must be 'prange' or 'legacy', got {range_mode!r}")
        self.tree = tree
        self.range_mode = range_mode

    def search(self, key: int) -> Optional[int]:
        return self.tree.point_search(key)

    def insert(self, key: int, ptr: int) -> None:
        self.tree.pio_insert(key, ptr)

    def delete(self, key: int, ptr: Optional[int]) -> None:
        self.tree.pio_delete(key, ptr)

    def update(self, key: int, ptr: int) -> None:
        self.tree.pio_update(key, ptr)

    def range(self, start: int, end: int) -> List[Tuple[int, int]]:
        search = self.tree.prange_search if self.range_mode == 'prange' else self.tree.range_search_legacy
        return [tuple(r) for r in search(start, end)]

    def finish(self) -> None:
        self.tree.force_flush()

    def audit(self) -> int:
        return self.tree.audit()


def open_device(params: BenchParams) -> BlockDevice:
    base = DeviceConfig.from_file(params.device_config) if params.device_config else None
    return create_device(params.device, params.path, base, page_size=params.page_size,
                         channels=params.channels)


def build_index(index: str, device: BlockDevice, params: BenchParams,
                records: List[Tuple[int, int]], range_mode: str = 'prange'):
    """Create, bulk load and warm up one index on an empty device."""
    if index == 'bplus':
        tree = BPlusTree.create(device, node_pages=params.node_pages, fanout=params.fanout,
                                leaf_capacity=params.ls_capacity, buffer_pages=params.buffer_pages,
                                write_back=params.write_back)
        tree.bulk_load(records, params.fill_factor)
        tree.warm_up()
        return BaselineHandle(tree)
    if index == 'pio':
        config = PioConfig(pio_max=params.pio_max, speriod=params.speriod, bcnt=params.bcnt,
                           leaf_segments=params.leaf_segments, opq_pages=params.opq_pages,
                           flush_mode=params.flush_mode, ls_capacity=params.ls_capacity)
        tree = PioBTree.create(device, config, fanout=params.fanout, buffer_pages=params.pio_pool_pages)
        tree.bulk_load(records, params.fill_factor)
        tree.warm_up()
        return PioHandle(tree, range_mode)
    raise ConfigError(f'unknown index {index!r}; expected one of {INDEXES}')


def _first_difference(expected: List, actual: List) -> Tuple[int, object, object]:
    for i, (e, a) in enumerate(zip(expected, actual)):
        if e != a:
            return e[0], e, a
    i = min(len(expected), len(actual))
    longer = expected if len(expected) > len(actual) else actual
    key = longer[i][0]
    return (key, expected[i] if i < len(expected) else None, actual[i] if i < len(actual) else None)


def replay(trace: Sequence[TraceRecord], handle, device: BlockDevice, experiment: str = 'run',
           oracle: Optional[ShadowOracle] = None, config: Optional[Dict] = None) -> RunReport:
    """
    Execute ``trace`` in order and measure it, queued updates flushed at the end.

    With an oracle every search and range result is checked as it is produced.

    Raises:
        VerificationError: first answer that disagrees with the oracle
    """
    counts: Counter = Counter()
    before = device.stats()
    started = time.perf_counter()
    for record in trace:
        counts[record.op] += 1
        op, key = record.op, record.key
        if op == 's':
            actual = handle.search(key)
            if oracle is not None and actual != oracle.search(key):
                raise VerificationError('search', key, oracle.search(key), actual)
        elif op == 'r':
            actual = handle.range(key, record.key2)
            if oracle is not None:
                expected = oracle.range(key, record.key2)
                if actual != expected:
                    raise VerificationError('range', *_first_difference(expected, actual))
        else:
            ptr = record.ptr if record.ptr is not None or op == 'd' else data_ptr_for(key)
            if op == 'i':
                handle.insert(key, ptr)
            elif op == 'd':
                handle.delete(key, ptr)
            else:
                handle.update(key, ptr)
            if oracle is not None:
                oracle.apply(record._replace(ptr=ptr))
    handle.finish()
    delta = device.stats().delta(before)
    return RunReport(experiment=experiment, index=handle.name, ops=sum(counts.values()),
                     op_counts=dict(counts), wall_time_s=time.perf_counter() - started,
                     simulated_time_us=delta.simulated_time_us, pages_read=delta.pages_read,
                     pages_written=delta.pages_written, read_batches=delta.read_batches,
                     write_batches=delta.write_batches, config=dict(config or {}))


def run_workload(spec: WorkloadSpec, index: str, params: BenchParams, experiment: str = 'run',
                 verify: bool = False, range_mode: str = 'prange',
                 trace: Optional[Sequence[TraceRecord]] = None) -> RunReport:
    """Bulk load ``spec.preload`` keys into a fresh index, then replay the workload."""
    device = open_device(params)
    try:
        records = preload_records(spec)
        handle = build_index(index, device, params, records, range_mode)
        trace = generate(spec) if trace is None else trace
        oracle = ShadowOracle(records) if verify else None
        config = {**params.as_dict(), 'workload': spec.kind.value, 'insert_ratio': spec.insert_ratio,
                  'preload': spec.preload, 'seed': spec.seed, 'range_mode': range_mode}
        report = replay(trace, handle, device, experiment, oracle, config)
        if verify:
            handle.audit()
    finally:
        device.close()
    logger.info(f'{experiment}/{index}: {report.ops} ops, {report.avg_latency_us:.2f}us/op simulated')
    return report


SWEEP_FIELDS = {
    'buffer': ('buffer_pages', WorkloadKind.SEARCH),
    'opq': ('opq_pages', WorkloadKind.INSERT),
    'channels': ('channels', None),
    'ratio': ('insert_ratio', WorkloadKind.MIXED),
    'range': ('range_sizes', WorkloadKind.RANGE),
}


def sweep(dimension: str, grid: Sequence, spec: WorkloadSpec, params: BenchParams,
          indexes: Sequence[str] = INDEXES, verify: bool = False) -> pd.DataFrame:
    """
    One run per grid point and index, as a DataFrame of report rows.

    The OPQ sweep only runs the PIO B-tree; the range sweep runs the PIO B-tree with
    both the batched and the sibling-chain range search.
    """
    if dimension not in SWEEP_FIELDS:
        raise ConfigError(f'unknown sweep dimension {dimension!r}; expected one of {sorted(SWEEP_FIELDS)}')
    if not grid:
        raise ConfigError('sweep grid is empty')
    name, kind = SWEEP_FIELDS[dimension]
    rows = []
    for value in grid:
        run_spec, run_params = spec, params
        if dimension == 'ratio':
            run_spec = replace(spec, kind=kind, insert_ratio=float(value))
        elif dimension == 'range':
            run_spec = replace(spec, kind=kind, range_sizes=(int(value),))
        else:
            run_params = replace(params, **{name: int(value)})
            if kind is not None:
                run_spec = replace(spec, kind=kind)
        for index in indexes:
            if dimension == 'opq' and index != 'pio':
                continue
            modes = ('prange', 'legacy') if dimension == 'range' and index == 'pio' else ('prange',)
            for mode in modes:
                report = run_workload(run_spec, index, run_params, f'sweep-{dimension}', verify, mode)
                row = report.as_row()
                row.update({'dimension': dimension, 'value': value,
                            'access': mode if dimension == 'range' else ''})
                rows.append(row)
        logger.info(f'sweep {dimension}: finished {name}={value}')
    return pd.DataFrame(rows)


ACCURACY_CASES = (
    {'entries': 10_000, 'fanout': 11, 'leaf_segments': 1, 'buffer_pages': 112, 'opq_pages': 1,
     'channels': 16, 'insert_ratio': 0.0},
    {'entries': 10_000, 'fanout': 11, 'leaf_segments': 1, 'buffer_pages': 1200, 'opq_pages': 1,
     'channels': 1, 'insert_ratio': 0.0},
    {'entries': 10_000, 'fanout': 11, 'leaf_segments': 2, 'buffer_pages': 1200, 'opq_pages': 1,
     'channels': 4, 'insert_ratio': 0.0},
    {'entries': 10_000, 'fanout': 11, 'leaf_segments': 4, 'buffer_pages': 1200, 'opq_pages': 1,
     'channels': 16, 'insert_ratio': 0.0},
    {'entries': 100_000, 'fanout': 11, 'leaf_segments': 1, 'buffer_pages': 1200, 'opq_pages': 4,
     'channels': 16, 'insert_ratio': 0.0},
    {'entries': 10_000, 'fanout': 11, 'leaf_segments': 1, 'buffer_pages': 1200, 'opq_pages': 4,
     'channels': 16, 'insert_ratio': 0.5, 'fill_factor': 0.5},
    {'entries': 10_000, 'fanout': 11, 'leaf_segments': 1, 'buffer_pages': 3000, 'opq_pages': 16,
     'channels': 16, 'insert_ratio': 0.9, 'fill_factor': 0.5},
    {'entries': 10_000, 'fanout': 11, 'leaf_segments': 1, 'buffer_pages': 3000, 'opq_pages': 1,
     'channels': 2, 'insert_ratio': 0.9, 'fill_factor': 0.5},
)


def relative_error(predicted: float, measured: float) -> float:
    """|p - m| / m; zero when both are zero, infinite when only the measurement is."""
    if measured:
        return abs(predicted - measured) / measured
    return 0.0 if predicted == 0 else math.inf


def accuracy(cases: Iterable[Dict] = ACCURACY_CASES, op_count: int = 2000, seed: int = 42,
             page_size: int = 4096, indexes: Sequence[str] = INDEXES) -> pd.DataFrame:
    """
    Compare predicted per-operation latency with the measured simulated latency.

    Trees are bulk loaded with leaves of L * (F - 1) entries at the case's fill factor
    (full unless given) so the measured geometry matches the one the formulas assume.
    Update cases load half full so flushes append instead of splitting every leaf.
    Warm-up fills the pool top-down before measuring, and the baseline writes every
    update through, as the model charges one page write per update.
    """
    rows = []
    for case in cases:
        fanout, leaf_segments = case['fanout'], case['leaf_segments']
        params = BenchParams(page_size=page_size, channels=case['channels'], leaf_segments=leaf_segments,
                             opq_pages=case['opq_pages'], buffer_pages=case['buffer_pages'],
                             fanout=fanout, ls_capacity=fanout - 1,
                             fill_factor=case.get('fill_factor', 1.0), write_back=False)
        ri = case['insert_ratio']
        domain = case['entries'] if ri == 0 else case['entries'] * 4
        spec = WorkloadSpec(kind=WorkloadKind.MIXED if ri else WorkloadKind.SEARCH, op_count=op_count,
                            key_domain=domain, preload=case['entries'], insert_ratio=ri, seed=seed)
        scratch = create_device('emu', page_size=page_size, channels=case['channels'])
        calibration = calibrate(scratch, params.pio_max, leaf_sizes=(1, leaf_segments))
        scratch.close()
        for index in indexes:
            opq = case['opq_pages'] if index == 'pio' else 0
            report = run_workload(spec, index, params, 'accuracy')
            profile = calibration.profile(
                entries=case['entries'], fanout=fanout, utilization=params.fill_factor,
                leaf_pages=leaf_segments if index == 'pio' else 1,
                search_ratio=1 - ri, insert_ratio=ri, buffer_pages=case['buffer_pages'],
                opq_pages=opq, bcnt=min(params.bcnt, max(1, opq) * (fanout - 1)))
            predicted = predict_latency(profile, index)
            measured = report.avg_latency_us
            rows.append({**case, 'index': index, 'predicted_us': round(predicted, 3),
                         'measured_us': round(measured, 3),
                         'relative_error': relative_error(predicted, measured)})
    return pd.DataFrame(rows)
