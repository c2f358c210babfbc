"""
Average-latency predictors for the baseline B+-tree and the PIO B-tree.

All functions are pure and return microseconds per index operation unless stated
otherwise. Update, delete and insert are priced alike.
"""
import math
from typing import Callable, Dict, Iterable, Optional, Tuple

from piobtree.cost.models import (
    BufferGeometry, CostProfile, EtaRounding, SearchVariant, round_eta, snap,
)
from piobtree.exceptions import CostModelError

ENTRY_BYTES = 16
HEADER_BYTES = 16


def tree_height(entries: float, avg_entries: float) -> float:
    """log_{F'} N as a real number; callers round per context."""
    if entries < 1:
        raise CostModelError(f'entries must be >= 1, got {entries}')
    if avg_entries < 2:
        raise CostModelError(f"F' must be >= 2, got {avg_entries}")
    return math.log(entries) / math.log(avg_entries)


def utility_cost(entries_per_node: float, read_time: float) -> float:
    """Index page utility (log2 of the entries per node) over the node read time."""
    if entries_per_node < 2:
        raise CostModelError(f'a node must hold at least 2 entries, got {entries_per_node}')
    if read_time <= 0:
        raise CostModelError('read time must be positive')
    return math.log2(entries_per_node) / read_time


def best_node_size(page_size: int, read_latency: float, size_factor: Callable[[int], float],
                   candidates: Iterable[int] = (1, 2, 4, 8)) -> Tuple[int, Dict[int, float]]:
    """
    Node size (in pages) with the highest utility/cost ratio.

    Args:
        page_size: bytes per page
        read_latency: single-page read latency
        size_factor: latency scale per I/O unit, e.g. ``DeviceConfig.size_factor``
        candidates: node sizes to compare

    Returns:
        (best node size, ratio per candidate); ties go to the smaller size
    """
    ratios = {}
    for pages in candidates:
        entries = (pages * page_size - HEADER_BYTES) // ENTRY_BYTES
        ratios[pages] = utility_cost(entries, read_latency * size_factor(pages))
    best = None
    for pages in sorted(ratios):
        if best is None or ratios[pages] > ratios[best]:
            best = pages
    return best, ratios


def profile_height(profile: CostProfile) -> float:
    if profile.height is not None:
        return profile.height
    return tree_height(profile.entries, profile.avg_entries)


def level_count(profile: CostProfile) -> int:
    """Integral number of levels used by the per-level PIO formulas."""
    return max(1, math.ceil(snap(profile_height(profile))))


def cost_bplus(profile: CostProfile) -> float:
    """Unbuffered B+-tree: H * Pr + Ri * Pw."""
    return profile_height(profile) * profile.pr + profile.insert_ratio * profile.pw


def buffer_geometry(entries: float, avg_entries: float, buffer_pages: float,
                    rounding: EtaRounding = EtaRounding.FLOOR,
                    height: Optional[float] = None) -> BufferGeometry:
    """
    Cached top levels for a pool of ``buffer_pages`` nodes.

    LastLevel ~ log_{F'} M, H_b = LastLevel + 1, H_nb = round(H - H_b) and the coverage
    of the partially cached level is 1 / F'^(frac(H - H_b)). H is log_{F'} N unless
    ``height`` is given. Rounding defaults to the floor, as in ``predict_latency``.
    """
    if buffer_pages < 1:
        raise CostModelError(f'buffer must hold at least one node, got {buffer_pages}')
    if height is None:
        height = tree_height(entries, avg_entries)
    last_level = math.log(buffer_pages) / math.log(avg_entries)
    buffered_height = last_level + 1
    eta = snap(height - buffered_height)
    if eta <= 0:
        return BufferGeometry(last_level, buffered_height, 0, 1.0, eta)
    coverage = 1 / avg_entries ** (eta % 1)
    return BufferGeometry(last_level, buffered_height, round_eta(eta, rounding), coverage, eta)


def buffered_read_term(eta: float, avg_entries: float,
                       rounding: EtaRounding = EtaRounding.CEIL) -> float:
    """Expected uncached node reads per descent: round(eta) + (1 - 1/F'^frac(eta))."""
    eta = snap(eta)
    if eta <= 0:
        return 0.0
    return round_eta(eta, rounding) + (1 - 1 / avg_entries ** (eta % 1))


def cost_bplus_buffered(profile: CostProfile, rounding: EtaRounding = EtaRounding.CEIL) -> float:
    """Buffered B+-tree cost computed from eta = H - log_{F'} M - 1, i.e. log_{F'}(N / M) - 1."""
    fp = profile.avg_entries
    eta = profile_height(profile) - math.log(profile.buffer_pages) / math.log(fp) - 1
    return buffered_read_term(eta, fp, rounding) * profile.pr + profile.insert_ratio * profile.pw


def cost_bplus_buffered_geometry(profile: CostProfile,
                                 rounding: EtaRounding = EtaRounding.CEIL) -> float:
    """The same cost through the buffered-height decomposition (H_nb + 1 - Cvrg)."""
    geometry = buffer_geometry(profile.entries, profile.avg_entries, profile.buffer_pages, rounding,
                               height=profile_height(profile))
    reads = 0.0 if geometry.fully_buffered else geometry.non_buffered_height + (1 - geometry.coverage)
    return reads * profile.pr + profile.insert_ratio * profile.pw


def g_of_level(level: float, profile: CostProfile) -> float:
    """
    Queued updates sharing one level-``level`` node read during a flush:
    (O * F' / U) / (N / (F'^(H - level) * L)), clamped to [1, bcnt].
    """
    height = level_count(profile)
    if not 0 <= level <= height - 1:
        raise CostModelError(f'level {level} outside [0, {height - 1}]')
    fp = profile.avg_entries
    queued = profile.opq_pages * fp / profile.utilization
    nodes = profile.entries / (fp ** (height - level) * profile.leaf_pages)
    return min(max(queued / nodes, 1.0), float(profile.bcnt))


def pio_search(profile: CostProfile) -> float:
    return (level_count(profile) - 1) * profile.pr + profile.leaf_read()


def pio_insert(profile: CostProfile) -> float:
    height = level_count(profile)
    reads = sum(1 / g_of_level(level, profile) for level in range(height - 1))
    return reads * profile.pr_batch + (profile.pr_batch + profile.pw_batch) / g_of_level(height - 1, profile)


def cost_pio(profile: CostProfile) -> float:
    """Unbuffered PIO B-tree: Rs * Search + Ri * Insert."""
    return profile.search_ratio * pio_search(profile) + profile.insert_ratio * pio_insert(profile)


def pio_eta(profile: CostProfile) -> float:
    """eta = log_{F'}(N / (L * (M - O))) - 1; the OPQ takes its pages from the pool."""
    memory = profile.buffer_pages - profile.opq_pages
    return snap(math.log(profile.entries / (profile.leaf_pages * memory)) / math.log(profile.avg_entries) - 1)


def pio_search_buffered(profile: CostProfile, rounding: EtaRounding = EtaRounding.CEIL,
                        variant: SearchVariant = SearchVariant.CANONICAL) -> float:
    eta = pio_eta(profile)
    if eta <= 0:
        return profile.leaf_read()
    if SearchVariant(variant) == SearchVariant.CANONICAL:
        reads = buffered_read_term(eta, profile.avg_entries, rounding)
    else:
        reads = max(0.0, round_eta(eta, rounding) - 1 / profile.avg_entries ** (eta % 1))
    return reads * profile.pr + profile.leaf_read()


def pio_insert_buffered(profile: CostProfile, rounding: EtaRounding = EtaRounding.CEIL) -> float:
    height = level_count(profile)
    leaf_term = (profile.pr_batch + profile.pw_batch) / g_of_level(height - 1, profile)
    eta = pio_eta(profile)
    if eta <= 0:
        return leaf_term
    fp = profile.avg_entries
    first = min(round_eta(eta, rounding), height - 1)
    reads = sum(1 / g_of_level(level, profile) for level in range(first, height - 1))
    memory = profile.buffer_pages - profile.opq_pages
    last_level = min(max(math.log(memory) / math.log(fp) - 1, 0.0), height - 1)
    reads -= (1 / fp ** (eta % 1)) / g_of_level(last_level, profile)
    return max(reads, 0.0) * profile.pr_batch + leaf_term


def cost_pio_buffered(profile: CostProfile, rounding: EtaRounding = EtaRounding.CEIL,
                      variant: SearchVariant = SearchVariant.CANONICAL) -> float:
    """Buffered PIO B-tree: Rs * Search' + Ri * Insert' with M - O pages of pool."""
    return (profile.search_ratio * pio_search_buffered(profile, rounding, variant)
            + profile.insert_ratio * pio_insert_buffered(profile, rounding))


def predict_latency(profile: CostProfile, index: str,
                    rounding: EtaRounding = EtaRounding.FLOOR,
                    variant: SearchVariant = SearchVariant.PRINTED) -> float:
    """
    Per-operation latency forecast compared against measured runs.

    The floor rounding and the printed search term count completely cached levels
    as free, which matches a pool that holds every internal node.
    """
    if index == 'pio':
        return cost_pio_buffered(profile, rounding, variant)
    if index == 'bplus':
        return cost_bplus_buffered(profile, rounding)
    raise CostModelError(f"unknown index {index!r}; expected 'pio' or 'bplus'")
