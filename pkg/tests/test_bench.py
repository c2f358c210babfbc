from collections import Counter
from dataclasses import replace

import pandas as pd
import pytest

from piobtree.bench import (
    BenchParams, ShadowOracle, TraceRecord, WorkloadKind, WorkloadSpec, generate, preload_records,
    read_trace, replay, run_workload, sweep, write_trace,
)
from piobtree.bench.cli import main
from piobtree.bench.runner import BaselineHandle, PioHandle, build_index, open_device
from piobtree.exceptions import ConfigError, VerificationError
from piobtree.utils.report_utils import drop_wall_clock, read_report, write_report, write_text_report

from tests.conftest import T1_KEYS, ptr

MIXED = WorkloadSpec(op_count=2000, key_domain=10_000, preload=2000, insert_ratio=0.3,
                     delete_ratio=0.2, update_ratio=0.2, seed=7)
SMALL = BenchParams(page_size=512, opq_pages=2, buffer_pages=16)
SMALL_WORKLOAD = ['--ops', '300', '--preload', '500', '--key-domain', '5000', '--range-sizes', '16,128']


class TestWorkload:
    def test_generation_is_reproducible(self):
        assert generate(MIXED) == generate(MIXED)
        assert generate(MIXED) != generate(replace(MIXED, seed=8))

    def test_mix_follows_the_ratios(self):
        counts = Counter(r.op for r in generate(MIXED))
        assert sum(counts.values()) == 2000
        for op, share in (('i', 0.3), ('d', 0.2), ('u', 0.2), ('s', 0.3)):
            assert abs(counts[op] - share * 2000) < 100

    def test_updates_target_live_keys(self):
        oracle = ShadowOracle(preload_records(MIXED))
        for record in generate(MIXED):
            if record.op == 'i':
                assert oracle.search(record.key) is None
            elif record.op in ('d', 'u'):
                assert oracle.search(record.key) is not None
            oracle.apply(record)
        assert len(oracle) == 2000 + sum(1 if r.op == 'i' else -1 if r.op == 'd' else 0
                                         for r in generate(MIXED))

    def test_range_workload(self):
        spec = WorkloadSpec(kind='range', key_domain=1000, preload=100, range_sizes=(16, 128),
                            ranges_per_size=10)
        trace = generate(spec)
        assert len(trace) == 20
        assert [r.key2 - r.key for r in trace] == [16] * 10 + [128] * 10
        assert all(0 <= r.key and r.key2 <= 1000 for r in trace)

    @pytest.mark.parametrize('fields', [
        {'insert_ratio': 0.6, 'delete_ratio': 0.6},
        {'preload': 20, 'key_domain': 10},
        {'key_domain': 100, 'preload': 10, 'range_sizes': (200,)},
        {'op_count': -1},
    ])
    def test_spec_validation(self, fields):
        with pytest.raises(ConfigError):
            WorkloadSpec(**fields)


class TestTraceFormat:
    @pytest.mark.parametrize('line, expected', [
        ('r 5 10', TraceRecord('r', 5, key2=10)),
        ('i 5 41', TraceRecord('i', 5, ptr=41)),
        ('d 5', TraceRecord('d', 5)),
        ('s 5', TraceRecord('s', 5)),
    ])
    def test_parse(self, line, expected):
        record = TraceRecord.parse(line)
        assert record == expected
        assert record.to_line() == line

    @pytest.mark.parametrize('line', ['s 5 6', 'r 10 5', 'r 10', 'x 1', 'i a', 'i', 'u 1 2 3'])
    def test_parse_errors(self, line):
        with pytest.raises(ConfigError):
            TraceRecord.parse(line, 3)

    def test_comments_and_blank_lines_are_skipped(self, tmp_path):
        path = tmp_path / 'ops.trace'
        path.write_text('# preload 8 keys\n\ni 3 25\n  s 3\n')
        assert read_trace(str(path)) == [TraceRecord('i', 3, ptr=25), TraceRecord('s', 3)]

    def test_file_round_trip(self, tmp_path):
        path = str(tmp_path / 'ops.trace')
        trace = generate(replace(MIXED, op_count=200))
        assert write_trace(path, trace) == 200
        assert read_trace(path) == trace

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            read_trace(str(tmp_path / 'absent.trace'))


class TestReplay:
    @pytest.mark.parametrize('handle_of', [
        lambda request: PioHandle(request.getfixturevalue('t1_pio')),
        lambda request: BaselineHandle(request.getfixturevalue('t1_bplus')),
    ])
    def test_point_search_cost(self, request, handle_of):
        handle = handle_of(request)
        report = replay([TraceRecord('s', 25)], handle, handle.tree.device)
        assert report.ops == 1
        assert report.pages_read == 2
        assert report.simulated_time_us == 200
        assert report.avg_latency_us == 200

    def test_disagreement_is_reported(self, t1_pio):
        oracle = ShadowOracle((k, ptr(k)) for k in T1_KEYS)
        oracle.apply(TraceRecord('i', 7, ptr=70))
        with pytest.raises(VerificationError) as info:
            replay([TraceRecord('s', 25), TraceRecord('s', 7)], PioHandle(t1_pio), t1_pio.device,
                   oracle=oracle)
        assert info.value.key == 7
        assert info.value.expected == 70

    def test_range_disagreement(self, t1_bplus):
        oracle = ShadowOracle((k, ptr(k)) for k in T1_KEYS)
        oracle.apply(TraceRecord('i', 12, ptr=1200))
        with pytest.raises(VerificationError) as info:
            replay([TraceRecord('r', 10, key2=30)], BaselineHandle(t1_bplus), t1_bplus.device,
                   oracle=oracle)
        assert info.value.op == 'range'
        assert info.value.key == 12

    def test_unknown_range_mode(self, t1_pio):
        with pytest.raises(ConfigError):
            PioHandle(t1_pio, 'scan')


class TestRunWorkload:
    @pytest.mark.parametrize('index, flush_mode', [('bplus', 'full'), ('pio', 'full'), ('pio', 'partial')])
    def test_mixed_workload_matches_oracle(self, index, flush_mode):
        report = run_workload(MIXED, index, replace(SMALL, flush_mode=flush_mode), verify=True)
        assert report.ops == 2000
        assert report.pages_written > 0

    @pytest.mark.parametrize('range_mode', ['prange', 'legacy'])
    def test_range_workload_matches_oracle(self, range_mode):
        spec = WorkloadSpec(kind='range', key_domain=5000, preload=1000, range_sizes=(16, 256),
                            ranges_per_size=20, seed=5)
        report = run_workload(spec, 'pio', SMALL, verify=True, range_mode=range_mode)
        assert report.ops == 40

    def test_unknown_index(self):
        with pytest.raises(ConfigError):
            run_workload(MIXED, 'lsm', SMALL)

    def test_runs_are_deterministic(self):
        rows = [run_workload(MIXED, 'pio', SMALL).as_row() for _ in range(2)]
        first, second = (drop_wall_clock(pd.DataFrame([row])) for row in rows)
        pd.testing.assert_frame_equal(first, second)


@pytest.mark.slow
def test_batched_updates_beat_the_baseline():
    spec = WorkloadSpec(kind=WorkloadKind.INSERT, op_count=100_000, key_domain=1_000_000, preload=50_000)
    params = BenchParams(channels=16, opq_pages=1, buffer_pages=128)
    baseline = run_workload(spec, 'bplus', params)
    pio = run_workload(spec, 'pio', params)
    assert baseline.op_counts == pio.op_counts == {'i': 100_000}
    assert pio.simulated_time_us * 4 <= baseline.simulated_time_us


def test_larger_queues_flush_faster():
    spec = WorkloadSpec(kind=WorkloadKind.INSERT, op_count=5000, key_domain=1_000_000, preload=50_000)
    params = BenchParams(channels=16, opq_pages=1, buffer_pages=128)
    df = sweep('opq', [1, 4, 16, 64], spec, params)
    assert list(df['index']) == ['pio'] * 4
    times = list(df['simulated_time_us'])
    assert all(later <= earlier for earlier, later in zip(times, times[1:]))


class ForcedFlushHandle(PioHandle):
    """Empties the queue every ``every`` operations on top of the tree's own policy."""

    def __init__(self, tree, every: int):
        super().__init__(tree)
        self.every = every
        self._ops = 0

    def _tick(self):
        self._ops += 1
        if self._ops % self.every == 0:
            self.tree.force_flush()

    def search(self, key):
        found = super().search(key)
        self._tick()
        return found

    def insert(self, key, ptr):
        super().insert(key, ptr)
        self._tick()

    def delete(self, key, ptr):
        super().delete(key, ptr)
        self._tick()

    def update(self, key, ptr):
        super().update(key, ptr)
        self._tick()


@pytest.mark.slow
@pytest.mark.parametrize('ri', [0.1, 0.5, 0.9])
@pytest.mark.parametrize('index, flush_mode, force_every', [
    ('bplus', 'full', None),
    ('pio', 'full', None),
    ('pio', 'partial', None),
    ('pio', 'full', 997),
])
def test_acceptance_scale_runs_match_the_oracle(ri, index, flush_mode, force_every):
    spec = WorkloadSpec(op_count=100_000, key_domain=1_000_000, preload=100_000,
                        insert_ratio=0.6 * ri, delete_ratio=0.2 * ri, update_ratio=0.2 * ri, seed=11)
    params = BenchParams(opq_pages=4, buffer_pages=256, bcnt=300, flush_mode=flush_mode)
    records = preload_records(spec)
    device = open_device(params)
    try:
        handle = build_index(index, device, params, records)
        if force_every:
            handle = ForcedFlushHandle(handle.tree, force_every)
        oracle = ShadowOracle(records)
        report = replay(generate(spec), handle, device, 'acceptance', oracle)
        assert report.ops == spec.op_count
        assert handle.audit() == len(oracle)
        assert handle.range(0, spec.key_domain) == oracle.items()
    finally:
        device.close()


@pytest.mark.parametrize('channels', [1, 4, 16])
def test_batched_range_search_never_loses(channels):
    spec = WorkloadSpec(kind=WorkloadKind.RANGE, key_domain=20_000, preload=20_000, ranges_per_size=20)
    params = BenchParams(channels=channels)
    df = sweep('range', [2 ** 4, 2 ** 7, 2 ** 10, 2 ** 13], spec, params, indexes=('pio',))
    latency = df.pivot(index='value', columns='access', values='avg_latency_us')
    assert (latency['prange'] <= latency['legacy']).all()
    if channels == 16:
        large = latency.loc[[2 ** 10, 2 ** 13]]
        assert (large['legacy'] >= 3 * large['prange']).all()


def test_sweep_rejects_unknown_dimension():
    with pytest.raises(ConfigError):
        sweep('colour', [1], MIXED, SMALL)


class TestReports:
    def test_csv_round_trip(self, tmp_path):
        df = pd.DataFrame({'index': ['pio', 'bplus'], 'ops': [10, 20], 'avg_latency_us': [1.5, 2.25]})
        path = write_report(df, str(tmp_path / 'results' / 'run.csv'), {'seed': 3, 'channels': 16})
        table, config = read_report(path)
        pd.testing.assert_frame_equal(table, df)
        assert config == {'channels': 16, 'seed': 3}

    def test_text_report_alignment(self, tmp_path):
        path = tmp_path / 'tune.txt'
        text = write_text_report([('pr', 100.0), ('L_opt', 4)], str(path), title='# tune')
        assert text == '# tune\npr     100.0000\nL_opt  4\n'
        assert path.read_text() == text


class TestCli:
    def test_bench_run(self, capsys, tmp_path):
        out = str(tmp_path / 'run.csv')
        code = main(['bench', 'run', *SMALL_WORKLOAD, '--page-size', '512', '--verify', '--out', out,
                     '--log-level', 'WARNING'])
        assert code == 0
        table, config = read_report(out)
        assert sorted(table['index']) == ['bplus', 'pio']
        assert config['page_size'] == 512
        assert 'pio' in capsys.readouterr().out

    def test_bad_flag(self):
        assert main(['bench', 'run', '--bogus']) == 2

    def test_tune_rejects_bad_ratios(self):
        assert main(['tune', '--ri', '1.5']) == 2
        assert main(['tune', '--ri', '0.5', '--rs', '0.2']) == 2

    def test_tune(self, capsys):
        assert main(['tune', '--ri', '0.5', '--entries', '1e5', '--log-level', 'WARNING']) == 0
        out = capsys.readouterr().out
        assert 'L_opt' in out and 'S_opt' in out

    def test_calibrate(self, capsys):
        assert main(['calibrate', '--channels', '4', '--log-level', 'WARNING']) == 0
        assert capsys.readouterr().out.startswith('# calibration')

    @pytest.fixture
    def store(self, tmp_path):
        return ['--path', str(tmp_path / 'tree.pio'), '--wal', str(tmp_path / 'tree.wal'),
                '--page-size', '512', '--log-level', 'WARNING']

    def test_load_then_verify(self, store, capsys):
        workload = [*SMALL_WORKLOAD, '--txn-size', '3', '--checkpoint-every', '100']
        assert main(['load', *store, *workload]) == 0
        assert main(['verify', *store]) == 0
        assert 'ok:' in capsys.readouterr().out

    def test_crash_then_recovering_verify(self, store, capsys):
        assert main(['load', *store, *SMALL_WORKLOAD, '--crash-at', 'before-flush-end']) == 0
        assert main(['verify', *store, '--recover']) == 0
        assert 'ok:' in capsys.readouterr().out
        assert main(['load', *store, *SMALL_WORKLOAD]) == 2
        assert main(['load', *store, *SMALL_WORKLOAD, '--overwrite']) == 0

    def test_recover_command(self, store, capsys):
        assert main(['load', *store, *SMALL_WORKLOAD, '--crash-at', 'after-node-write']) == 0
        assert main(['recover', *store]) == 0
        assert main(['verify', *store]) == 0
        assert 'recovered:' in capsys.readouterr().out
