import random

import pytest
from hypothesis import given, strategies as st

from piobtree.bench.models import TraceRecord
from piobtree.bench.runner import ShadowOracle
from piobtree.bench.workload import data_ptr_for
from piobtree.btree.models import decode_node
from piobtree.cost import CostProfile, g_of_level
from piobtree.device import DeviceConfig, EmulatedFlashDevice
from piobtree.exceptions import TreeError
from piobtree.pio import PioBTree, PioConfig, check_search_needed

from tests.conftest import T1_KEYS, ptr


def root_of(tree):
    return decode_node(tree.root, tree.device.snapshot_pages([tree.root])[0])


def leaf_keys(tree, pid):
    return [e.key for e in tree._peek_leaf(pid).entries]


def keys_of(records):
    return [r.key for r in records]


@pytest.mark.parametrize('i, search_keys, expected', [
    (1, [7, 22], True),
    (2, [7, 22], False),
    (3, [7, 22], True),
    (4, [7, 22], False),
    (4, [30], True),
    (3, [20], True),
    (2, [20], False),
    (1, [], False),
])
def test_check_search_needed(i, search_keys, expected):
    assert check_search_needed(i, [10, 20, 30], search_keys) is expected


class TestT1:
    def test_layout(self, t1_pio):
        root = root_of(t1_pio)
        assert t1_pio.height == 2
        assert root.keys == [10, 20, 30]
        assert root.children == [1, 2, 3, 4]
        assert [leaf_keys(t1_pio, pid) for pid in root.children] == [[1, 5], [10, 15], [20, 25], [30, 35]]
        assert all(t1_pio.lsmap.get(pid) == 0 for pid in root.children)
        assert t1_pio.audit() == 8

    def test_point_search_reads_one_node_per_level(self, t1_pio):
        before = t1_pio.device.stats()
        assert t1_pio.point_search(25) == ptr(25)
        delta = t1_pio.device.stats().delta(before)
        assert delta.read_batches == 2 and delta.pages_read == 2

    def test_mpsearch_batches_each_level(self, t1_pio):
        before = t1_pio.device.stats()
        leaves = t1_pio.mpsearch([25, 1])
        delta = t1_pio.device.stats().delta(before)
        assert [leaf.page_id for leaf in leaves] == [1, 3]
        assert delta.read_batches == 2 and delta.pages_read == 3

    def test_updates_wait_in_the_queue(self, t1_pio):
        before = t1_pio.device.stats()
        t1_pio.pio_insert(7, ptr(7))
        t1_pio.pio_delete(25)
        assert t1_pio.device.stats().delta(before).simulated_time_us == 0
        assert t1_pio.point_search(7) == ptr(7)
        assert t1_pio.point_search(25) is None
        assert keys_of(t1_pio.prange_search(0, 100)) == [1, 5, 7, 10, 15, 20, 30, 35]

    def test_flush_of_two_inserts(self, t1_pio):
        t1_pio.pio_insert(7, ptr(7))
        t1_pio.pio_insert(22, ptr(22))
        before = t1_pio.device.stats()
        flushes = t1_pio.force_flush()
        delta = t1_pio.device.stats().delta(before)
        assert (delta.read_batches, delta.pages_read) == (2, 3)
        assert (delta.write_batches, delta.pages_written) == (1, 2)

        (stats,) = flushes
        assert stats.entries_processed == 2
        assert stats.key_range == (7, 22)
        assert stats.nodes_read_by_level == {0: 1, 1: 2}
        assert stats.leaves_appended == 2 and stats.leaves_split == 0
        assert root_of(t1_pio).keys == [10, 20, 30]
        assert leaf_keys(t1_pio, 1) == [1, 5, 7]
        assert leaf_keys(t1_pio, 3) == [20, 25, 22]
        assert len(t1_pio.opq) == 0
        assert t1_pio.point_search(7) == ptr(7)
        assert t1_pio.audit() == 10

    def test_flush_batches_both_touched_leaves(self, t1_pio, monkeypatch):
        device = t1_pio.device
        reads, writes = [], []
        psync_read, psync_write = device.psync_read, device.psync_write

        def recording_read(pages, *args, **kwargs):
            reads.append(list(pages))
            return psync_read(pages, *args, **kwargs)

        def recording_write(pairs, *args, **kwargs):
            writes.append([page for page, _ in pairs])
            return psync_write(pairs, *args, **kwargs)

        monkeypatch.setattr(device, 'psync_read', recording_read)
        monkeypatch.setattr(device, 'psync_write', recording_write)
        t1_pio.pio_insert(7, ptr(7))
        t1_pio.pio_insert(22, ptr(22))
        t1_pio.force_flush()

        assert reads == [[t1_pio.root], [1, 3]]
        assert writes == [[1, 3]]

    def test_audit_rejects_underfull_leaf(self, t1_pio):
        t1_pio._write_leaf_images([(1, t1_pio._leaf_image(1, [(1, ptr(1))], 2))])
        with pytest.raises(TreeError, match='below the minimum'):
            t1_pio.audit()

    def test_prange_matches_legacy_with_fewer_batches(self, t1_pio):
        before = t1_pio.device.stats()
        batched = t1_pio.prange_search(12, 27)
        middle = t1_pio.device.stats()
        legacy = t1_pio.range_search_legacy(12, 27)
        after = t1_pio.device.stats()
        assert keys_of(batched) == keys_of(legacy) == [15, 20, 25]
        assert middle.delta(before).read_batches == 2
        assert after.delta(middle).read_batches == 3
        assert middle.delta(before).simulated_time_us < after.delta(middle).simulated_time_us

    def test_full_leaf_splits_and_grows_the_tree(self, t1_pio):
        for key in (2, 3, 4):
            t1_pio.pio_insert(key, ptr(key))
        (stats,) = t1_pio.force_flush()
        assert stats.leaves_shrunk == 1
        assert stats.leaves_split == 1
        assert stats.height_change == 1
        assert t1_pio.height == 3
        assert t1_pio.audit() == 11
        assert keys_of(t1_pio.records()) == sorted(T1_KEYS + (2, 3, 4))
        reopened = PioBTree.open(t1_pio.device)
        assert reopened.height == 3
        assert reopened.records() == t1_pio.records()

    def test_underflowing_leaf_merges_with_sibling(self, t1_pio):
        t1_pio.pio_insert(2, ptr(2))
        t1_pio.pio_insert(3, ptr(3))
        t1_pio.force_flush()
        for key in (1, 2, 3):
            t1_pio.pio_delete(key)
        (stats,) = t1_pio.force_flush()
        assert stats.leaves_merged == 1
        root = root_of(t1_pio)
        assert root.keys == [20, 30]
        assert leaf_keys(t1_pio, root.children[0]) == [5, 10, 15]
        assert not t1_pio.device.is_allocated(2)
        assert t1_pio.audit() == 7

    def test_underflowing_leaf_borrows_from_full_sibling(self, t1_pio):
        t1_pio.pio_insert(11, ptr(11))
        t1_pio.pio_insert(12, ptr(12))
        t1_pio.force_flush()
        t1_pio.pio_delete(1)
        t1_pio.pio_delete(5)
        t1_pio.pio_insert(6, ptr(6))
        (stats,) = t1_pio.force_flush()
        assert stats.leaves_redistributed == 1
        assert root_of(t1_pio).keys == [12, 20, 30]
        assert leaf_keys(t1_pio, 1) == [6, 10, 11]
        assert t1_pio.audit() == 9

    def test_fold_rules(self, t1_pio):
        t1_pio.pio_update(25, 1)
        assert t1_pio.point_search(25) == 1
        t1_pio.pio_update(26, 1)
        t1_pio.pio_insert(25, 99)
        t1_pio.force_flush()
        assert t1_pio.point_search(25) == 1
        assert t1_pio.point_search(26) is None
        t1_pio.pio_delete(25, 12345)
        assert t1_pio.point_search(25) == 1
        t1_pio.pio_delete(25, 1)
        t1_pio.force_flush()
        assert t1_pio.point_search(25) is None

    def test_uncommitted_entries_are_not_flushed(self, t1_pio):
        t1_pio.pio_insert(3, ptr(3), txn=7)
        assert t1_pio.force_flush() == []
        assert len(t1_pio.opq) == 1
        assert t1_pio.commit_txn(7) == 1
        (stats,) = t1_pio.force_flush()
        assert stats.entries_processed == 1
        t1_pio.pio_insert(4, ptr(4), txn=8)
        assert t1_pio.abort_txn(8) == 1
        assert len(t1_pio.opq) == 0
        assert t1_pio.point_search(4) is None

    def test_queue_full_of_uncommitted_entries(self, t1_pio):
        for key in range(100, 112):
            t1_pio.pio_insert(key, ptr(key), txn=9)
        with pytest.raises(TreeError):
            t1_pio.pio_insert(200, ptr(200))

    def test_full_mode_empties_the_queue(self, t1_pio):
        for key in range(100, 113):
            t1_pio.pio_insert(key, ptr(key))
        assert len(t1_pio.opq) == 1
        assert t1_pio.audit() == 20


def test_partial_mode_flushes_lowest_keys(device, t1_records):
    config = PioConfig(ls_capacity=4, opq_pages=2, bcnt=2, flush_mode='partial')
    tree = PioBTree.create(device, config, fanout=4).bulk_load(t1_records, 0.5)
    assert tree.bcnt == 2
    for key in range(40, 47):
        tree.pio_insert(key, ptr(key))
    assert len(tree.opq) == 5
    assert tree.last_flush.key_range == (40, 41)
    assert tree.point_search(45) == ptr(45)


def test_bcnt_is_capped_by_queue_capacity(device):
    tree = PioBTree.create(device, PioConfig(opq_pages=2, bcnt=5000), fanout=4)
    assert tree.opq.capacity == 6
    assert tree.bcnt == 6


class TestMultiSegmentLeaves:
    @pytest.fixture
    def tree(self, device):
        config = PioConfig(ls_capacity=2, leaf_segments=4, opq_pages=4)
        return PioBTree.create(device, config, fanout=4).bulk_load(
            [(k, ptr(k)) for k in range(10, 90, 10)], 0.5)

    def test_compacted_leaves_start_in_the_upper_half(self, tree):
        assert root_of(tree).children == [1, 5]
        assert tree.lsmap.get(1) == 2 and tree.lsmap.get(5) == 2
        assert tree.audit() == 8

    def test_appends_spill_into_following_segments(self, tree):
        for key in (11, 12, 13):
            tree.pio_insert(key, ptr(key))
        before = tree.device.stats()
        (stats,) = tree.force_flush()
        delta = tree.device.stats().delta(before)
        assert stats.leaves_appended == 1
        assert delta.pages_read == 2
        assert delta.pages_written == 2
        assert tree.lsmap.get(1) == 3
        assert [len(s) for s in tree._peek_leaf(1).segments] == [2, 2, 2, 1]
        assert tree.point_search(13) == ptr(13)
        assert tree.audit() == 11

    def test_leaf_without_room_is_read_whole_and_split(self, tree):
        for key in (11, 12, 13):
            tree.pio_insert(key, ptr(key))
        tree.force_flush()
        tree.pio_insert(14, ptr(14))
        tree.pio_insert(15, ptr(15))
        before = tree.device.stats()
        (stats,) = tree.force_flush()
        delta = tree.device.stats().delta(before)
        assert stats.leaves_split == 1
        assert delta.pages_read == 1 + 1 + 4
        assert keys_of(tree.records()) == [10, 11, 12, 13, 14, 15, 20, 30, 40, 50, 60, 70, 80]
        assert tree.audit() == 13

    def test_lsmap_survives_reopen(self, tree):
        for key in (11, 12, 13):
            tree.pio_insert(key, ptr(key))
        tree.close()
        reopened = PioBTree.open(tree.device)
        assert reopened.lsmap.get(1) == 3
        assert reopened.lsmap.get(5) == 2
        assert reopened.records() == tree.records()
        assert reopened.audit() == 11

    def test_flush_after_close_invalidates_the_saved_lsmap(self, tree):
        for key in (11, 12, 13):
            tree.pio_insert(key, ptr(key))
        tree.close()
        for key in (51, 52, 53):
            tree.pio_insert(key, ptr(key))
        tree.force_flush()
        reopened = PioBTree.open(tree.device)
        assert reopened.lsmap.get(5) == 3
        assert reopened.point_search(53) == ptr(53)
        assert reopened.audit() == 14

    def test_lsmap_is_rebuilt_without_close(self, tree):
        for key in (11, 12, 13):
            tree.pio_insert(key, ptr(key))
        tree.force_flush()
        reopened = PioBTree.open(tree.device)
        assert reopened.lsmap.get(1) == 3
        assert reopened.audit() == 11


@pytest.mark.parametrize('keep_every', [16, 4, 3])
def test_scattered_deletes_keep_leaves_half_full(device, keep_every):
    config = PioConfig(ls_capacity=8, leaf_segments=2, opq_pages=64)
    tree = PioBTree.create(device, config, fanout=5).bulk_load([(k, ptr(k)) for k in range(200)])
    assert tree.height == 3
    for key in range(200):
        if key % keep_every:
            tree.pio_delete(key)
    (stats,) = tree.force_flush()
    survivors = list(range(0, 200, keep_every))
    assert stats.leaves_merged > 0
    assert tree.audit() == len(survivors)
    assert keys_of(tree.records()) == survivors
    for key in survivors[:5]:
        assert tree.point_search(key) == ptr(key)


def test_mpsearch_issues_one_batch_per_level():
    device = EmulatedFlashDevice(DeviceConfig(channels=16))
    tree = PioBTree.create(device, PioConfig(pio_max=64, ls_capacity=64), fanout=64)
    tree.bulk_load([(k, data_ptr_for(k)) for k in range(0, 200_000, 2)])
    assert tree.height == 3
    keys = random.Random(3).sample(range(200_000), 32)
    before = device.stats()
    leaves = tree.mpsearch(keys)
    delta = device.stats().delta(before)
    assert delta.read_batches == 3
    assert len(leaves) <= 32
    for key in keys:
        expected = data_ptr_for(key) if key % 2 == 0 else None
        assert tree.point_search(key) == expected


def test_measured_sharing_follows_the_model():
    device = EmulatedFlashDevice(DeviceConfig())
    tree = PioBTree.create(device, PioConfig(ls_capacity=10, opq_pages=100), fanout=11)
    tree.bulk_load([(k, data_ptr_for(k)) for k in range(0, 20_000, 2)])
    assert tree.height == 4
    for key in random.Random(11).sample(range(1, 20_000, 2), 1000):
        tree.pio_insert(key, data_ptr_for(key))
    (stats,) = tree.force_flush()
    profile = CostProfile(entries=10_000, fanout=11, utilization=1.0, leaf_pages=1,
                          opq_pages=100, buffer_pages=101, bcnt=1000)
    for level in range(3):
        predicted = g_of_level(level, profile)
        assert abs(stats.g_measured(level) - predicted) / predicted <= 0.25
    assert tree.audit() == 11_000


@given(seed=st.integers(0, 2 ** 32 - 1), flush_mode=st.sampled_from(['full', 'partial']),
       leaf_segments=st.sampled_from([1, 2, 4]), opq_pages=st.sampled_from([1, 2, 4]))
def test_matches_shadow_oracle(seed, flush_mode, leaf_segments, opq_pages):
    rng = random.Random(seed)
    device = EmulatedFlashDevice(DeviceConfig(page_count=1 << 14))
    config = PioConfig(ls_capacity=3, leaf_segments=leaf_segments, opq_pages=opq_pages,
                       bcnt=5, flush_mode=flush_mode)
    preload = [(k, data_ptr_for(k)) for k in sorted(rng.sample(range(400), 60))]
    tree = PioBTree.create(device, config, fanout=5).bulk_load(preload, 0.7)
    oracle = ShadowOracle(preload)

    for step in range(250):
        op = rng.choice('iiddusr')
        key = rng.randrange(400)
        if op == 's':
            assert tree.point_search(key) == oracle.search(key)
        elif op == 'r':
            end = key + rng.randrange(1, 80)
            expected = oracle.range(key, end)
            assert [tuple(r) for r in tree.prange_search(key, end)] == expected
            assert [tuple(r) for r in tree.range_search_legacy(key, end)] == expected
        else:
            if op == 'i':
                record = TraceRecord('i', key, ptr=data_ptr_for(key, step))
                tree.pio_insert(key, record.ptr)
            elif op == 'u':
                record = TraceRecord('u', key, ptr=data_ptr_for(key, step))
                tree.pio_update(key, record.ptr)
            else:
                choice = rng.choice([None, oracle.search(key), data_ptr_for(key, 7)])
                record = TraceRecord('d', key, ptr=choice)
                tree.pio_delete(key, choice)
            oracle.apply(record)
        if step % 97 == 96:
            tree.force_flush()
            assert tree.audit() == len(oracle)

    tree.force_flush()
    assert tree.audit() == len(oracle)
    assert [tuple(r) for r in tree.records()] == oracle.items()
