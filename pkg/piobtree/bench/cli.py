import argparse
import logging
import os
import random
import sys
from typing import Dict, List, Optional, Sequence

import pandas as pd

from piobtree import configure_logging, create_device
from piobtree.bench.models import BenchParams, TraceRecord, WorkloadKind, WorkloadSpec
from piobtree.bench.runner import INDEXES, SWEEP_FIELDS, accuracy, run_workload, sweep
from piobtree.bench.workload import data_ptr_for, generate, preload_records, read_trace, write_trace
from piobtree.config import Config
from piobtree.cost.models import EtaRounding, SearchVariant
from piobtree.cost.tuning import calibrate, tune
from piobtree.device.models import DeviceConfig
from piobtree.exceptions import ConfigError, PioBTreeError, SimulatedCrash, VerificationError
from piobtree.pio.models import PioConfig
from piobtree.pio.opq import AUTOCOMMIT
from piobtree.pio.pio_tree import PioBTree
from piobtree.recovery.manager import CRASH_POINTS, CrashInjector, RecoveryManager
from piobtree.recovery.wal import Wal
from piobtree.utils.report_utils import write_report, write_text_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _grid(text: str) -> List[float]:
    try:
        return [float(v) if '.' in v else int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'not a comma-separated list of numbers: {text!r}')


def common_parser() -> argparse.ArgumentParser:
    """Device, index and logging flags shared by every subcommand."""
    parser = argparse.ArgumentParser(add_help=False)
    group = parser.add_argument_group('device and index')
    group.add_argument('--device', choices=('emu', 'file'), default='emu')
    group.add_argument('--path', help='data file of the file device')
    group.add_argument('--device-config', help='key=value device description file')
    group.add_argument('--channels', type=int)
    group.add_argument('--page-size', type=int)
    group.add_argument('--leaf-segments', type=int, default=Config.LEAF_SEGMENTS)
    group.add_argument('--opq-pages', type=int, default=Config.OPQ_PAGES)
    group.add_argument('--piomax', type=int, default=Config.PIO_MAX)
    group.add_argument('--speriod', type=int, default=Config.SPERIOD)
    group.add_argument('--bcnt', type=int, default=Config.BCNT)
    group.add_argument('--buffer-pages', type=int, default=Config.BUFFER_PAGES)
    group.add_argument('--fanout', type=int, default=0, help='0 derives the fanout from the page size')
    group.add_argument('--flush-mode', choices=('full', 'partial'), default='full')
    parser.add_argument('--log-level', default=Config.LOG_LEVEL)
    parser.add_argument('--out', help='output file')
    return parser


def workload_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    group = parser.add_argument_group('workload')
    group.add_argument('--workload', choices=[k.value for k in WorkloadKind], default='mixed')
    group.add_argument('--ops', type=int, default=100_000)
    group.add_argument('--key-domain', type=int, default=1_000_000)
    group.add_argument('--preload', type=int, default=100_000)
    group.add_argument('--insert-ratio', type=float, default=0.5)
    group.add_argument('--delete-ratio', type=float, default=0.0)
    group.add_argument('--update-ratio', type=float, default=0.0)
    group.add_argument('--range-sizes', type=_grid, default=[2 ** 4, 2 ** 7, 2 ** 10, 2 ** 13])
    group.add_argument('--ranges-per-size', type=int, default=100)
    group.add_argument('--seed', type=int, default=42)
    group.add_argument('--trace', help='replay this trace file instead of generating one')
    return parser


def build_parser() -> argparse.ArgumentParser:
    common, workload = common_parser(), workload_parser()
    parser = argparse.ArgumentParser(prog='piobtree', description='PIO B-tree experiments and tools')
    commands = parser.add_subparsers(dest='command', required=True)

    bench = commands.add_parser('bench', help='run experiments')
    bench_commands = bench.add_subparsers(dest='bench_command', required=True)

    run = bench_commands.add_parser('run', parents=[common, workload], help='one workload per index')
    run.add_argument('--index', choices=INDEXES + ('both',), default='both')
    run.add_argument('--range-mode', choices=('prange', 'legacy'), default='prange')
    run.add_argument('--verify', action='store_true', help='check every answer against an oracle')
    run.add_argument('--save-trace', help='write the generated trace to this file')
    run.set_defaults(handler=cmd_bench_run)

    sw = bench_commands.add_parser('sweep', parents=[common, workload], help='sweep one dimension')
    sw.add_argument('--dimension', choices=sorted(SWEEP_FIELDS), required=True)
    sw.add_argument('--grid', type=_grid, required=True)
    sw.add_argument('--index', choices=INDEXES + ('both',), default='both')
    sw.add_argument('--verify', action='store_true')
    sw.set_defaults(handler=cmd_bench_sweep)

    acc = bench_commands.add_parser('accuracy', parents=[common],
                                    help='cost-model predictions against measured latency')
    acc.add_argument('--ops', type=int, default=2000)
    acc.add_argument('--seed', type=int, default=42)
    acc.add_argument('--index', choices=INDEXES + ('both',), default='pio')
    acc.set_defaults(handler=cmd_bench_accuracy)

    tn = commands.add_parser('tune', parents=[common], help='choose L, O and the baseline node size')
    tn.add_argument('--rs', type=float, help='search ratio; defaults to 1 - ri')
    tn.add_argument('--ri', type=float, required=True, help='insert ratio')
    tn.add_argument('--entries', type=float, default=1e6)
    tn.add_argument('--utilization', type=float, default=1.0)
    tn.add_argument('--rounding', choices=[r.value for r in EtaRounding], default=EtaRounding.CEIL.value)
    tn.add_argument('--search-variant', choices=[v.value for v in SearchVariant],
                    default=SearchVariant.CANONICAL.value)
    tn.set_defaults(handler=cmd_tune)

    cal = commands.add_parser('calibrate', parents=[common], help='measure device latencies')
    cal.add_argument('--samples', type=int, default=1)
    cal.set_defaults(handler=cmd_calibrate)

    load = commands.add_parser('load', parents=[common, workload],
                               help='build a persistent PIO B-tree and run a logged workload on it')
    load.add_argument('--wal', help='write-ahead log file')
    load.add_argument('--overwrite', action='store_true')
    load.add_argument('--txn-size', type=int, default=0, help='operations per transaction; 0 auto-commits')
    load.add_argument('--checkpoint-every', type=int, default=0)
    load.add_argument('--crash-at', choices=CRASH_POINTS)
    load.add_argument('--crash-occurrence', type=int, default=1)
    load.set_defaults(handler=cmd_load)

    rec = commands.add_parser('recover', parents=[common], help='recover a crashed PIO B-tree')
    rec.add_argument('--wal')
    rec.set_defaults(handler=cmd_recover)

    ver = commands.add_parser('verify', parents=[common], help='audit a persisted PIO B-tree')
    ver.add_argument('--wal')
    ver.add_argument('--recover', action='store_true', help='run recovery before the audit')
    ver.add_argument('--samples', type=int, default=1000, help='keys cross-checked by point search')
    ver.set_defaults(handler=cmd_verify)
    return parser


def bench_params(args: argparse.Namespace) -> BenchParams:
    """Flags first, then the device description file, then Config."""
    base = DeviceConfig.from_file(args.device_config) if args.device_config else DeviceConfig.from_config()
    return BenchParams(
        page_size=args.page_size or base.page_size,
        channels=args.channels or base.channels,
        leaf_segments=args.leaf_segments,
        opq_pages=args.opq_pages,
        pio_max=args.piomax,
        speriod=args.speriod,
        bcnt=args.bcnt,
        buffer_pages=args.buffer_pages,
        fanout=args.fanout,
        flush_mode=args.flush_mode,
        device=args.device,
        path=args.path,
        device_config=args.device_config,
    )


def workload_spec(args: argparse.Namespace) -> WorkloadSpec:
    return WorkloadSpec(kind=WorkloadKind(args.workload), op_count=args.ops, key_domain=args.key_domain,
                        preload=args.preload, insert_ratio=args.insert_ratio,
                        delete_ratio=args.delete_ratio, update_ratio=args.update_ratio,
                        range_sizes=tuple(int(s) for s in args.range_sizes),
                        ranges_per_size=args.ranges_per_size, seed=args.seed)


def _indexes(choice: str) -> Sequence[str]:
    return INDEXES if choice == 'both' else (choice,)


def _device(args: argparse.Namespace, params: BenchParams):
    if args.device == 'file' and not args.path:
        raise ConfigError('--device file needs --path')
    base = DeviceConfig.from_file(args.device_config) if args.device_config else None
    return create_device(args.device, args.path, base, page_size=params.page_size,
                         channels=params.channels)


def _emit(text: str, path: Optional[str] = None) -> None:
    sys.stdout.write(text)
    if path:
        with open(path, 'w') as f:
            f.write(text)


# Subcommands

def cmd_bench_run(args: argparse.Namespace) -> int:
    params, spec = bench_params(args), workload_spec(args)
    trace = read_trace(args.trace) if args.trace else generate(spec)
    if args.save_trace:
        write_trace(args.save_trace, trace)
    rows = []
    for index in _indexes(args.index):
        report = run_workload(spec, index, params, 'run', args.verify, args.range_mode, trace)
        rows.append(report.as_row())
    df = pd.DataFrame(rows)
    if args.out:
        write_report(df, args.out, {**params.as_dict(), 'workload': spec.kind.value, 'seed': spec.seed})
    sys.stdout.write(df[['index', 'ops', 'simulated_time_us', 'avg_latency_us', 'pages_read',
                         'pages_written']].to_string(index=False) + '\n')
    return EXIT_OK


def cmd_bench_sweep(args: argparse.Namespace) -> int:
    params, spec = bench_params(args), workload_spec(args)
    df = sweep(args.dimension, args.grid, spec, params, _indexes(args.index), args.verify)
    if args.out:
        write_report(df, args.out, {**params.as_dict(), 'dimension': args.dimension,
                                    'grid': list(args.grid), 'seed': spec.seed})
    sys.stdout.write(df[['index', 'value', 'access', 'avg_latency_us']].to_string(index=False) + '\n')
    return EXIT_OK


def cmd_bench_accuracy(args: argparse.Namespace) -> int:
    params = bench_params(args)
    df = accuracy(op_count=args.ops, seed=args.seed, page_size=params.page_size,
                  indexes=_indexes(args.index))
    if args.out:
        write_report(df, args.out, {'ops': args.ops, 'seed': args.seed, 'page_size': params.page_size})
    sys.stdout.write(df[['index', 'entries', 'channels', 'leaf_segments', 'opq_pages', 'insert_ratio',
                         'predicted_us', 'measured_us', 'relative_error']].to_string(index=False) + '\n')
    return EXIT_OK


def cmd_tune(args: argparse.Namespace) -> int:
    if not 0 <= args.ri <= 1:
        raise ConfigError(f'--ri must lie in [0, 1], got {args.ri}')
    rs = 1 - args.ri if args.rs is None else args.rs
    if abs(rs + args.ri - 1) > 1e-9:
        raise ConfigError(f'--rs {rs} and --ri {args.ri} must sum to 1')
    params = bench_params(args)
    device = _device(args, params)
    try:
        calibration = calibrate(device, params.pio_max)
    finally:
        device.close()
    result = tune(calibration, params.page_size, args.entries, params.buffer_pages, args.ri,
                  utilization=args.utilization, bcnt=params.bcnt,
                  rounding=EtaRounding(args.rounding), variant=SearchVariant(args.search_variant),
                  fanout=params.fanout or None)
    rows = calibration.describe() + [
        ('L_opt', result.leaf_pages),
        ('O_opt', result.opq_pages),
        ('pio_cost_us', result.pio_cost),
        ('S_opt', result.node_pages),
        ('bplus_cost_us', result.bplus_cost),
    ]
    _emit(write_text_report(rows, title=f'# tune rs={rs} ri={args.ri} N={args.entries:g} '
                                        f'M={params.buffer_pages}'), args.out)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    params = bench_params(args)
    device = _device(args, params)
    try:
        calibration = calibrate(device, params.pio_max, samples=args.samples)
    finally:
        device.close()
    rows = calibration.describe() + [('channels', calibration.channels), ('PioMax', calibration.pio_max)]
    _emit(write_text_report(rows, title='# calibration (microseconds)'), args.out)
    return EXIT_OK


def _run_logged(manager: RecoveryManager, trace: Sequence[TraceRecord], txn_size: int,
                checkpoint_every: int) -> int:
    tree, txn, in_txn = manager.tree, None, 0
    done = 0
    for record in trace:
        if record.op == 's':
            tree.point_search(record.key)
        elif record.op == 'r':
            tree.prange_search(record.key, record.key2)
        else:
            if txn_size and txn is None:
                txn = manager.begin()
            target = txn if txn is not None else AUTOCOMMIT
            ptr = record.ptr if record.ptr is not None or record.op == 'd' else data_ptr_for(record.key)
            if record.op == 'i':
                manager.insert(record.key, ptr, target)
            elif record.op == 'd':
                manager.delete(record.key, ptr, target)
            else:
                manager.update(record.key, ptr, target)
            in_txn += 1
            if txn is not None and in_txn >= txn_size:
                manager.commit(txn)
                txn, in_txn = None, 0
        done += 1
        if checkpoint_every and done % checkpoint_every == 0:
            manager.checkpoint()
    if txn is not None:
        manager.commit(txn)
    return done


def _store_paths(args: argparse.Namespace) -> None:
    """Data file and log default to Config.DATA_DIR."""
    args.path = args.path or os.path.join(Config.DATA_DIR, 'tree.pio')
    args.wal = args.wal or os.path.join(Config.DATA_DIR, 'tree.wal')


def _file_device(args: argparse.Namespace, params: BenchParams):
    base = DeviceConfig.from_file(args.device_config) if args.device_config else None
    return create_device('file', args.path, base, page_size=params.page_size, channels=params.channels)


def cmd_load(args: argparse.Namespace) -> int:
    _store_paths(args)
    for path in (args.path, args.wal):
        if os.path.exists(path):
            if not args.overwrite:
                raise ConfigError(f'{path} exists; pass --overwrite to replace it')
            os.remove(path)
    params, spec = bench_params(args), workload_spec(args)
    device = _file_device(args, params)
    config = PioConfig(pio_max=params.pio_max, speriod=params.speriod, bcnt=params.bcnt,
                       leaf_segments=params.leaf_segments, opq_pages=params.opq_pages,
                       flush_mode=params.flush_mode)
    tree = PioBTree.create(device, config, fanout=params.fanout, buffer_pages=params.pio_pool_pages)
    tree.bulk_load(preload_records(spec))
    crash = CrashInjector(args.crash_at, args.crash_occurrence) if args.crash_at else CrashInjector()
    manager = RecoveryManager(tree, Wal(args.wal), crash)
    trace = read_trace(args.trace) if args.trace else generate(spec)
    try:
        done = _run_logged(manager, trace, args.txn_size, args.checkpoint_every)
        manager.checkpoint()
        tree.close()
    except SimulatedCrash as e:
        logger.warning(f'simulated crash at {e.label}; run `recover` to restart')
        return EXIT_OK
    finally:
        device.close()
    sys.stdout.write(f'loaded {spec.preload} records and applied {done} operations\n')
    return EXIT_OK


def cmd_recover(args: argparse.Namespace) -> int:
    _store_paths(args)
    params = bench_params(args)
    device = _file_device(args, params)
    try:
        manager = RecoveryManager.recover(device, Wal(args.wal), params.pio_pool_pages, params.flush_mode)
        queued = len(manager.tree.opq)
        manager.checkpoint()
        manager.tree.close()
    finally:
        device.close()
    sys.stdout.write(f'recovered: {queued} queued entries redone and flushed\n')
    return EXIT_OK


def check_read_paths(tree: PioBTree, samples: int = 1000) -> int:
    """
    Audit ``tree`` and check that its read paths agree.

    Returns:
        Number of records stored

    Raises:
        VerificationError: batched range, sibling-chain range or point search disagrees
            with the stored records
    """
    count = tree.audit()
    stored: Dict[int, int] = {r.key: r.data_ptr for r in tree.records()}
    if len(stored) != count:
        raise VerificationError('records', min(stored, default=-1), count, len(stored))
    if not stored:
        return count
    low, high = min(stored), max(stored) + 1
    for name, search in (('prange', tree.prange_search), ('legacy', tree.range_search_legacy)):
        found = {r.key: r.data_ptr for r in search(low, high)}
        if found != stored:
            key = min(set(found.items()) ^ set(stored.items()))[0]
            raise VerificationError(name, key, stored.get(key), found.get(key))
    rng = random.Random(samples)
    for key in rng.sample(sorted(stored), min(samples, len(stored))):
        actual = tree.point_search(key)
        if actual != stored[key]:
            raise VerificationError('search', key, stored[key], actual)
    return count


def cmd_verify(args: argparse.Namespace) -> int:
    _store_paths(args)
    params = bench_params(args)
    device = _file_device(args, params)
    try:
        if args.recover:
            tree = RecoveryManager.recover(device, Wal(args.wal), params.pio_pool_pages,
                                           params.flush_mode).tree
            tree.force_flush()
        else:
            tree = PioBTree.open(device, params.pio_pool_pages, params.flush_mode)
        count = check_read_paths(tree, args.samples)
    finally:
        device.close()
    sys.stdout.write(f'ok: {count} records, height {tree.height}\n')
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except VerificationError as e:
        logger.error(f'verification failed: {e}')
        return EXIT_FAILURE
    except ConfigError as e:
        logger.error(str(e))
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except PioBTreeError as e:
        logger.error(f'{type(e).__name__}: {e}')
        return EXIT_FAILURE
