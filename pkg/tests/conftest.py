import pytest

from piobtree.btree import BPlusTree
from piobtree.device import DeviceConfig, EmulatedFlashDevice
from piobtree.pio import PioBTree, PioConfig

# Fixture T1: eight keys in four half-full leaves under one root.
T1_KEYS = (1, 5, 10, 15, 20, 25, 30, 35)


def ptr(key: int) -> int:
    return key * 100


@pytest.fixture
def make_device():
    def factory(**overrides) -> EmulatedFlashDevice:
        overrides.setdefault('page_count', 1 << 16)
        return EmulatedFlashDevice(DeviceConfig(**overrides))
    return factory


@pytest.fixture
def device(make_device):
    return make_device()


@pytest.fixture
def t1_records():
    return [(k, ptr(k)) for k in T1_KEYS]


@pytest.fixture
def t1_bplus(device, t1_records):
    return BPlusTree.create(device, fanout=4, leaf_capacity=4).bulk_load(t1_records, 0.5)


@pytest.fixture
def t1_pio(device, t1_records):
    config = PioConfig(ls_capacity=4, leaf_segments=1, opq_pages=4)
    return PioBTree.create(device, config, fanout=4).bulk_load(t1_records, 0.5)
