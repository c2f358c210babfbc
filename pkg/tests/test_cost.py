import pytest
from hypothesis import given, strategies as st

from piobtree.bench.runner import ACCURACY_CASES, accuracy, relative_error
from piobtree.btree import TreeGeometry
from piobtree.cost import (
    Calibration, CostProfile, EtaRounding, best_node_size, buffer_geometry, calibrate, cost_bplus,
    cost_bplus_buffered, cost_bplus_buffered_geometry, cost_pio_buffered, g_of_level,
    predict_latency, tree_height, tune, utility_cost,
)
from piobtree.cost.formulas import level_count, pio_insert, pio_search
from piobtree.cost.tuning import LEAF_GRID, opq_grid
from piobtree.device import DeviceConfig, EmulatedFlashDevice
from piobtree.exceptions import CostModelError

PR_OF_L = {1: 100.0, 2: 100.0, 4: 160.0, 8: 250.0, 16: 500.0}
CALIBRATION = Calibration(pr=100.0, pw=200.0, pr_batch=6.25, pw_batch=12.5, pr_of_l=PR_OF_L,
                          channels=16, pio_max=64)

entries_st = st.floats(min_value=1e3, max_value=1e9, allow_nan=False, allow_infinity=False)
fanout_st = st.integers(5, 512)
utilization_st = st.floats(min_value=0.5, max_value=1.0)
buffer_st = st.integers(1, 10 ** 6)
rounding_st = st.sampled_from(list(EtaRounding))


def million(**fields) -> CostProfile:
    return CostProfile(**{'entries': 1e6, 'fanout': 101, **fields})


class TestBaseline:
    def test_unbuffered_cost(self):
        assert tree_height(1e6, 100) == pytest.approx(3)
        assert cost_bplus(million()) == pytest.approx(400)

    @pytest.mark.parametrize('buffer_pages, rounding, expected', [
        (100, EtaRounding.CEIL, 200),
        (100, EtaRounding.FLOOR, 200),
        (10, EtaRounding.CEIL, 390),
        (10, EtaRounding.FLOOR, 290),
        (10 ** 6, EtaRounding.CEIL, 100),
    ])
    def test_buffered_cost(self, buffer_pages, rounding, expected):
        profile = million(buffer_pages=buffer_pages)
        assert cost_bplus_buffered(profile, rounding) == pytest.approx(expected)
        assert cost_bplus_buffered_geometry(profile, rounding) == pytest.approx(expected)

    def test_geometry_defaults_to_floor_rounding(self):
        geometry = buffer_geometry(1e6, 100, 10)
        assert geometry.eta == pytest.approx(1.5)
        assert geometry.non_buffered_height == 1
        assert geometry == buffer_geometry(1e6, 100, 10, EtaRounding.FLOOR)
        profile = million(buffer_pages=10)
        assert predict_latency(profile, 'bplus') == pytest.approx(
            cost_bplus_buffered_geometry(profile, EtaRounding.FLOOR))

    def test_buffered_forms_share_the_profile_height(self):
        profile = million(buffer_pages=10, height=4)
        assert buffer_geometry(1e6, 100, 10, height=4).eta == pytest.approx(2.5)
        assert cost_bplus_buffered(profile, EtaRounding.FLOOR) == pytest.approx(390)
        assert cost_bplus_buffered_geometry(profile, EtaRounding.FLOOR) == pytest.approx(390)

    @given(entries=entries_st, fanout=fanout_st, utilization=utilization_st,
           buffer_pages=buffer_st, rounding=rounding_st)
    def test_both_buffered_forms_agree(self, entries, fanout, utilization, buffer_pages, rounding):
        profile = CostProfile(entries=entries, fanout=fanout, utilization=utilization,
                              buffer_pages=buffer_pages)
        assert cost_bplus_buffered(profile, rounding) == pytest.approx(
            cost_bplus_buffered_geometry(profile, rounding), rel=1e-9, abs=1e-6)

    @given(entries=entries_st, fanout=fanout_st, small=buffer_st, large=buffer_st)
    def test_floor_rounding_is_monotone_in_memory(self, entries, fanout, small, large):
        small, large = sorted((small, large))
        base = CostProfile(entries=entries, fanout=fanout, buffer_pages=small)
        more = base.evolve(buffer_pages=large)
        assert cost_bplus_buffered(more, EtaRounding.FLOOR) <= cost_bplus_buffered(base, EtaRounding.FLOOR) + 1e-9


class TestPio:
    def test_sharing_factor_clamps(self):
        profile = CostProfile(entries=10_000, fanout=11, opq_pages=100, buffer_pages=101, bcnt=500)
        assert level_count(profile) == 4
        assert g_of_level(0, profile) == 500
        assert g_of_level(1, profile) == pytest.approx(100)
        assert g_of_level(2, profile) == pytest.approx(10)
        assert g_of_level(3, profile) == 1.0
        assert g_of_level(0, profile.evolve(opq_pages=0)) == 1.0
        for level in (-1, 4):
            with pytest.raises(CostModelError):
                g_of_level(level, profile)

    def test_unbuffered_search(self):
        assert pio_search(million(pr_of_l={1: 100.0})) == pytest.approx(300)
        assert pio_search(million(leaf_pages=4, pr_of_l={4: 160.0})) == pytest.approx(360)

    @given(small=st.integers(1, 2000), large=st.integers(1, 2000))
    def test_insert_cost_does_not_grow_with_queue(self, small, large):
        small, large = sorted((small, large))
        base = million(buffer_pages=10 ** 6, opq_pages=small)
        assert pio_insert(base.evolve(opq_pages=large)) <= pio_insert(base) + 1e-9

    def test_fully_cached_tree_costs_one_leaf_read(self):
        profile = million(buffer_pages=10 ** 6, opq_pages=1, insert_ratio=0.0, search_ratio=1.0,
                          pr_of_l={1: 100.0})
        assert cost_pio_buffered(profile) == pytest.approx(100)

    def test_predict_latency_rejects_unknown_index(self):
        with pytest.raises(CostModelError):
            predict_latency(million(), 'lsm')


class TestProfileValidation:
    @pytest.mark.parametrize('fields', [
        {'search_ratio': 0.6, 'insert_ratio': 0.6},
        {'fanout': 2},
        {'buffer_pages': 4, 'opq_pages': 4},
        {'pr': 0},
        {'entries': 0.5},
    ])
    def test_rejects(self, fields):
        with pytest.raises(CostModelError):
            million(**fields)


class TestNodeSize:
    def test_two_page_nodes_win_on_the_default_curve(self):
        best, ratios = best_node_size(4096, 100.0, DeviceConfig().size_factor)
        assert best == 2
        assert ratios[2] > ratios[1] > ratios[4] > ratios[8]

    def test_utility_needs_two_entries(self):
        with pytest.raises(CostModelError):
            utility_cost(1, 100)


def test_calibrate_emulator():
    device = EmulatedFlashDevice(DeviceConfig(channels=16))
    calibration = calibrate(device, pio_max=64)
    assert (calibration.pr, calibration.pw) == (100, 200)
    assert calibration.pr_batch == pytest.approx(6.25)
    assert calibration.pw_batch == pytest.approx(12.5)
    assert calibration.pr_of_l == pytest.approx(PR_OF_L)
    assert device.allocated_count == 0


def test_opq_grid():
    assert opq_grid(64) == [1, 2, 4, 8, 16, 32]
    with pytest.raises(CostModelError):
        opq_grid(1)


@given(entries=st.floats(min_value=1e4, max_value=1e8), buffer_pages=st.integers(2, 4096),
       insert_ratio=st.floats(min_value=0.0, max_value=1.0), rounding=rounding_st)
def test_tune_matches_brute_force(entries, buffer_pages, insert_ratio, rounding):
    result = tune(CALIBRATION, 4096, entries, buffer_pages, insert_ratio, rounding=rounding)
    base = CALIBRATION.profile(entries=entries, fanout=TreeGeometry(4096).fanout,
                               search_ratio=1 - insert_ratio, insert_ratio=insert_ratio,
                               buffer_pages=buffer_pages)
    grid = [(leaf, opq) for leaf in LEAF_GRID for opq in opq_grid(buffer_pages)]
    costs = [cost_pio_buffered(base.evolve(leaf_pages=leaf, opq_pages=opq), rounding)
             for leaf, opq in grid]
    best = min(range(len(grid)), key=costs.__getitem__)
    assert (result.leaf_pages, result.opq_pages) == grid[best]
    assert result.pio_cost == pytest.approx(costs[best])
    assert result.bplus_cost <= cost_bplus_buffered(base, rounding) + 1e-9


def test_tune_reports_the_whole_grid():
    result = tune(CALIBRATION, 4096, 1e8, 4096, insert_ratio=0.9)
    assert min(cost for _, _, cost in result.grid) == result.pio_cost
    assert len(result.grid) == len(LEAF_GRID) * len(opq_grid(4096))


def test_relative_error_of_a_zero_measurement():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(62.1, 0.0) == float('inf')
    assert relative_error(90.0, 100.0) == pytest.approx(0.1)


def test_predictions_track_measurements():
    report = accuracy(op_count=1000)
    assert len(report) == 2 * len(ACCURACY_CASES)
    assert set(report['index']) == {'bplus', 'pio'}
    assert (report['relative_error'] <= 0.2).all(), report.to_string()
    heavy = report[report['insert_ratio'] >= 0.9]
    assert len(heavy) == 4
    assert set(heavy['opq_pages']) == {1, 16}
    # the whole baseline fits in the pool: only update writes remain
    baseline = heavy[heavy['index'] == 'bplus']
    assert list(baseline['predicted_us']) == pytest.approx([0.9 * 200.0] * 2)
