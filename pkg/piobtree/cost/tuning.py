import logging
from typing import Iterable, List, Optional, Sequence, Tuple

from piobtree.btree.models import TreeGeometry
from piobtree.cost.formulas import cost_bplus_buffered, cost_pio_buffered
from piobtree.cost.models import Calibration, CostProfile, EtaRounding, SearchVariant, TuningResult
from piobtree.device.base import BlockDevice
from piobtree.exceptions import CostModelError

logger = logging.getLogger(__name__)

LEAF_GRID = (1, 2, 4, 8, 16)
NODE_GRID = (1, 2, 4, 8)


def calibrate(device: BlockDevice, pio_max: int = 64, leaf_sizes: Iterable[int] = LEAF_GRID,
              samples: int = 1) -> Calibration:
    """
    Micro-benchmark the device on a scratch extent.

    Pr and Pw come from single-request batches, Pr' and Pw' are the per-page cost of
    PioMax-request batches and Pr(L) is a single L-page read. Timings are averaged
    over ``samples`` repetitions from the device's simulated clock.

    Args:
        device: idle device with room for the scratch extent
        pio_max: batch size used for the amortized latencies
        leaf_sizes: leaf sizes (pages) to measure Pr(L) for
        samples: repetitions per measurement

    Returns:
        Calibration with every latency in microseconds
    """
    sizes = sorted(set(leaf_sizes))
    count = max(pio_max, sizes[-1] if sizes else 1)
    start = device.alloc_extent(count)
    zero = bytes(device.config.page_size)
    device.psync_write([(start + i, zero) for i in range(count)])

    def timed(action) -> float:
        total = 0.0
        for _ in range(samples):
            before = device.stats()
            action()
            total += device.stats().delta(before).simulated_time_us
        return total / samples

    try:
        pages = [start + i for i in range(pio_max)]
        pr = timed(lambda: device.psync_read([start]))
        pw = timed(lambda: device.psync_write([(start, zero)]))
        pr_batch = timed(lambda: device.psync_read(pages)) / pio_max
        pw_batch = timed(lambda: device.psync_write([(p, zero) for p in pages])) / pio_max
        pr_of_l = {size: timed(lambda size=size: device.psync_read([start], size)) for size in sizes}
    finally:
        device.free_extent(start, count)

    calibration = Calibration(pr=pr, pw=pw, pr_batch=pr_batch, pw_batch=pw_batch, pr_of_l=pr_of_l,
                              channels=device.config.channels, pio_max=pio_max)
    logger.info(f"calibrated: Pr={pr:.2f} Pw={pw:.2f} Pr'={pr_batch:.2f} Pw'={pw_batch:.2f} "
                f'Pr(L)={pr_of_l}')
    return calibration


def opq_grid(buffer_pages: int) -> List[int]:
    """Powers of two up to half the memory budget."""
    grid = []
    size = 1
    while size <= buffer_pages // 2:
        grid.append(size)
        size *= 2
    if not grid:
        raise CostModelError(f'{buffer_pages} buffer pages leave no room for an OPQ')
    return grid


def tune(calibration: Calibration, page_size: int, entries: float, buffer_pages: int,
         insert_ratio: float, utilization: float = 1.0, bcnt: int = 5000,
         leaf_grid: Sequence[int] = LEAF_GRID, node_grid: Sequence[int] = NODE_GRID,
         rounding: EtaRounding = EtaRounding.CEIL,
         variant: SearchVariant = SearchVariant.CANONICAL,
         fanout: Optional[int] = None) -> TuningResult:
    """
    Grid search for the (L, O) pair minimising the buffered PIO cost and for the
    baseline node size minimising the buffered B+-tree cost.

    Ties go to the smaller L, then the smaller O (and the smaller node size).
    """
    fanout = fanout or TreeGeometry(page_size).fanout
    base = calibration.profile(entries=entries, fanout=fanout, utilization=utilization,
                               search_ratio=1 - insert_ratio, insert_ratio=insert_ratio,
                               buffer_pages=buffer_pages, bcnt=bcnt)
    grid: List[Tuple[int, int, float]] = []
    best: Optional[Tuple[int, int, float]] = None
    for leaf_pages in sorted(leaf_grid):
        for opq_pages in opq_grid(buffer_pages):
            cost = cost_pio_buffered(base.evolve(leaf_pages=leaf_pages, opq_pages=opq_pages),
                                     rounding, variant)
            grid.append((leaf_pages, opq_pages, cost))
            if best is None or cost < best[2]:
                best = (leaf_pages, opq_pages, cost)

    node_pages, node_cost = node_size_opt(base, calibration, page_size, node_grid, rounding)
    result = TuningResult(leaf_pages=best[0], opq_pages=best[1], pio_cost=best[2],
                          node_pages=node_pages, bplus_cost=node_cost, grid=grid)
    logger.info(f'tuned: L={result.leaf_pages} O={result.opq_pages} ({result.pio_cost:.2f}us), '
                f'S_opt={node_pages} pages ({node_cost:.2f}us)')
    return result


def node_size_opt(base: CostProfile, calibration: Calibration, page_size: int,
                  node_grid: Sequence[int], rounding: EtaRounding) -> Tuple[int, float]:
    """Baseline node size with the lowest buffered cost; the pool holds M // s nodes."""
    best: Optional[Tuple[int, float]] = None
    for pages in sorted(node_grid):
        nodes = base.buffer_pages // pages
        if nodes < 1:
            continue
        scale = calibration.pr_of_l.get(pages, calibration.pr * pages) / calibration.pr
        profile = base.evolve(fanout=TreeGeometry(page_size, pages).fanout, buffer_pages=nodes,
                              opq_pages=0, pr=calibration.pr * scale, pw=calibration.pw * scale)
        cost = cost_bplus_buffered(profile, rounding)
        if best is None or cost < best[1]:
            best = (pages, cost)
    if best is None:
        raise CostModelError(f'no node size fits in {base.buffer_pages} buffer pages')
    return best
