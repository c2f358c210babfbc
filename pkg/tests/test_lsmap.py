import pytest

from piobtree.exceptions import LsMapRangeError
from piobtree.pio import LsMap


@pytest.mark.parametrize('segments, bits', [(1, 1), (2, 1), (4, 1), (8, 2), (16, 3)])
def test_bits_per_leaf(segments, bits):
    assert LsMap(segments).bits == bits


def test_stores_offset_values():
    lsmap = LsMap(8)
    lsmap.set(10, 7)
    assert lsmap.stored(10) == 3
    assert lsmap.get(10) == 7
    with pytest.raises(LsMapRangeError):
        lsmap.set(10, 3)
    with pytest.raises(LsMapRangeError):
        lsmap.set(10, 8)


def test_clamp_lifts_lower_half():
    lsmap = LsMap(8)
    assert lsmap.clamp(1) == 4
    assert lsmap.clamp(6) == 6


def test_single_segment_leaves():
    lsmap = LsMap(1)
    lsmap.set(3, lsmap.clamp(0))
    assert lsmap.get(3) == 0


def test_encode_decode():
    lsmap = LsMap(16)
    leaves = [10, 20, 30, 40]
    for leaf, value in zip(leaves, (8, 15, 11, 9)):
        lsmap.set(leaf, value)
    data = lsmap.encode(leaves)
    assert len(data) == lsmap.encoded_size(4) == 2
    restored = LsMap(16)
    restored.decode(leaves, data)
    assert [restored.get(leaf) for leaf in leaves] == [8, 15, 11, 9]


def test_decode_rejects_short_image():
    with pytest.raises(LsMapRangeError):
        LsMap(16).decode([1, 2, 3], b'\x00')
