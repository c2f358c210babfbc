import os
import tempfile

import pytest
from hypothesis import given, strategies as st

from piobtree import create_device
from piobtree.device import (
    DeviceConfig, EmulatedFlashDevice, FileDevice, IoBatch, IoKind, IoRequest,
)
from piobtree.exceptions import (
    AddressError, ConfigError, DoubleFreeError, OutOfSpaceError, UsageError,
)


def allocated_device(pages: int = 64, **overrides) -> EmulatedFlashDevice:
    device = EmulatedFlashDevice(DeviceConfig(**overrides))
    for _ in range(pages):
        device.alloc_page()
    return device


def page_of(device, fill: int) -> bytes:
    return bytes([fill % 256]) * device.config.page_size


class TestLatencyModel:
    def test_batch_cost_counts_channel_waves(self):
        device = EmulatedFlashDevice(DeviceConfig(channels=16))
        assert device.batch_cost(1, IoKind.READ) == 100
        assert device.batch_cost(16, IoKind.READ) == 100
        assert device.batch_cost(17, IoKind.READ) == 200
        assert device.batch_cost(64, IoKind.READ) == 400
        assert device.batch_cost(1, IoKind.WRITE) == 200

    @given(batch=st.integers(1, 256), channels=st.integers(1, 64))
    def test_batching_never_costs_more_than_single_requests(self, batch, channels):
        device = EmulatedFlashDevice(DeviceConfig(channels=channels))
        single = device.batch_cost(1, IoKind.READ)
        cost = device.batch_cost(batch, IoKind.READ)
        assert cost <= batch * single
        assert cost <= device.batch_cost(batch + 1, IoKind.READ)
        if batch <= channels:
            assert cost == single

    def test_psync_read_is_one_batch(self):
        device = allocated_device(32)
        before = device.stats()
        buffers = device.psync_read(list(range(20)))
        delta = device.stats().delta(before)
        assert len(buffers) == 20
        assert delta.pages_read == 20
        assert delta.read_batches == 1
        assert delta.simulated_time_us == 200

    @given(st.integers(2, 64))
    def test_mixed_batch_is_priced_with_write_latency_and_penalty(self, size):
        device = allocated_device(64)
        requests = [IoRequest(IoKind.READ, 0)]
        requests += [IoRequest(IoKind.WRITE, p, page_of(device, p)) for p in range(1, size)]
        before = device.stats()
        device.psync_submit(IoBatch(requests, mixed=True))
        delta = device.stats().delta(before)
        assert delta.simulated_time_us / device.batch_cost(size, IoKind.WRITE) == pytest.approx(1.3)
        assert delta.read_batches == 1 and delta.write_batches == 1

    def test_flagged_single_kind_batch_pays_penalty(self):
        device = allocated_device(8)
        before = device.stats()
        device.psync_submit(IoBatch([IoRequest(IoKind.READ, p) for p in range(4)], mixed=True))
        assert device.stats().delta(before).simulated_time_us == pytest.approx(130)

    @pytest.mark.parametrize('unit, expected', [(1, 100), (2, 100), (4, 160), (8, 250), (16, 500)])
    def test_io_unit_size_factor(self, unit, expected):
        device = allocated_device(16)
        before = device.stats()
        (data,) = device.psync_read([0], unit)
        assert len(data) == unit * device.config.page_size
        assert device.stats().delta(before).simulated_time_us == pytest.approx(expected)

    def test_size_factor_interpolates_linearly_past_the_table(self):
        config = DeviceConfig()
        assert config.size_factor(3) == pytest.approx(1.5)
        assert config.size_factor(16) == pytest.approx(5.0)


class TestUsageErrors:
    def test_empty_batch(self):
        device = allocated_device(4)
        with pytest.raises(UsageError):
            device.psync_read([])

    def test_unflagged_mixed_batch(self):
        device = allocated_device(4)
        batch = IoBatch([IoRequest(IoKind.READ, 0), IoRequest(IoKind.WRITE, 1, page_of(device, 1))])
        with pytest.raises(UsageError):
            device.psync_submit(batch)

    def test_batch_over_max_batch(self):
        device = allocated_device(8, max_batch=4)
        with pytest.raises(UsageError):
            device.psync_read(list(range(5)))

    def test_wrong_buffer_length(self):
        device = allocated_device(4)
        with pytest.raises(UsageError):
            device.psync_write([(0, b'short')])

    def test_unallocated_page(self):
        device = allocated_device(4)
        with pytest.raises(AddressError):
            device.psync_read([4])
        with pytest.raises(AddressError):
            device.psync_read([2], 4)

    def test_failed_batch_is_not_charged(self):
        device = allocated_device(4)
        with pytest.raises(AddressError):
            device.psync_read([0, 9])
        assert device.stats().simulated_time_us == 0


class TestAllocation:
    def test_lowest_free_page_first(self):
        device = allocated_device(6)
        device.free_page(4)
        device.free_page(2)
        assert device.alloc_page() == 2
        assert device.alloc_page() == 4
        assert device.alloc_page() == 6

    def test_extent_reuses_lowest_fitting_run(self):
        device = allocated_device(10)
        for page in (2, 5, 6, 7):
            device.free_page(page)
        assert device.alloc_extent(2) == 5
        assert device.alloc_extent(2) == 10
        assert device.alloc_extent(1) == 2
        assert device.allocated_count == 11

    def test_double_free(self):
        device = allocated_device(2)
        device.free_page(1)
        with pytest.raises(DoubleFreeError):
            device.free_page(1)

    def test_out_of_space(self):
        device = allocated_device(4, page_count=4)
        with pytest.raises(OutOfSpaceError):
            device.alloc_page()
        with pytest.raises(OutOfSpaceError):
            device.alloc_extent(2)

    def test_reset_allocation(self):
        device = allocated_device(8)
        device.reset_allocation({0, 3})
        assert device.allocated_count == 2
        assert device.alloc_page() == 1
        assert not device.is_allocated(5)


def test_snapshot_and_restore_skip_accounting():
    device = allocated_device(4)
    device.psync_write([(1, page_of(device, 7))])
    before = device.stats()
    (image,) = device.snapshot_pages([1])
    device.restore_pages([(2, image)])
    assert device.stats().delta(before).simulated_time_us == 0
    assert device.psync_read([2]) == [page_of(device, 7)]
    with pytest.raises(UsageError):
        device.restore_pages([(2, b'x')])


@given(st.lists(st.tuples(st.integers(0, 31), st.binary(min_size=1, max_size=64)),
                min_size=1, max_size=40))
def test_file_device_survives_reopen(writes):
    config = DeviceConfig(page_size=64, page_count=32)
    expected = {page: payload.ljust(64, b'\0') for page, payload in writes}
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'data.db')
        device = FileDevice(path, config, sync=False)
        for _ in range(32):
            device.alloc_page()
        device.psync_write(list(expected.items()))
        device.close()

        reopened = FileDevice(path, config, sync=False)
        reopened.reset_allocation(range(32))
        pages = sorted(expected)
        assert reopened.psync_read(pages) == [expected[p] for p in pages]
        reopened.close()


def test_file_device_reports_emulator_time(tmp_path):
    config = DeviceConfig(page_size=512, page_count=64)
    emulated = EmulatedFlashDevice(config)
    on_disk = FileDevice(str(tmp_path / 'data.db'), config, sync=False)
    for device in (emulated, on_disk):
        device.alloc_extent(40)
        device.psync_write([(p, bytes(512)) for p in range(20)])
        device.psync_read(list(range(40)))
        device.psync_read([0, 8], 8)
    assert on_disk.stats() == emulated.stats()
    on_disk.close()


class TestDeviceConfig:
    def test_rejects_decreasing_size_curve(self):
        with pytest.raises(ConfigError):
            DeviceConfig(size_latency_curve={1: 1.0, 2: 0.8})

    @pytest.mark.parametrize('field, value', [('channels', 0), ('page_size', 32),
                                              ('page_count', 1), ('interleave_penalty', 0.5)])
    def test_rejects_bad_fields(self, field, value):
        with pytest.raises(ConfigError):
            DeviceConfig(**{field: value})

    def test_from_file(self, tmp_path):
        path = tmp_path / 'ssd.env'
        path.write_text('CHANNELS=8\nREAD_LATENCY_US=80\nSIZE_LATENCY_CURVE=1:1.0,2:1.2\n')
        config = DeviceConfig.from_file(str(path))
        assert config.channels == 8
        assert config.read_latency_us == 80.0
        assert config.size_latency_curve == {1: 1.0, 2: 1.2}
        assert config.write_latency_us == 200.0

    def test_from_file_rejects_unknown_keys(self, tmp_path):
        path = tmp_path / 'ssd.env'
        path.write_text('CHANNELZ=8\n')
        with pytest.raises(ConfigError):
            DeviceConfig.from_file(str(path))

    def test_with_overrides_ignores_none(self):
        config = DeviceConfig().with_overrides(channels=4, page_size=None)
        assert config.channels == 4
        assert config.page_size == 4096


class TestCreateDevice:
    def test_emulated(self):
        device = create_device('emu', config=DeviceConfig(page_count=16), channels=4)
        assert isinstance(device, EmulatedFlashDevice)
        assert device.config.channels == 4

    def test_file(self, tmp_path):
        device = create_device('file', str(tmp_path / 'dev.db'), DeviceConfig(page_count=16))
        assert isinstance(device, FileDevice)
        device.close()

    def test_file_needs_path(self):
        with pytest.raises(ConfigError):
            create_device('file', config=DeviceConfig(page_count=16))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            create_device('tape', config=DeviceConfig(page_count=16))
