"""Tests for the block device, buffer cache and write trace."""

import threading

import pytest

from app.services.blockdev import (
    BadImage,
    BlockDevice,
    BlockDeviceError,
    MemoryImage,
    OutOfRange,
    create_image,
    open_device,
)

BSIZE = 512


def make_dev(blocks=16, capacity=8):
    return BlockDevice.from_memory(blocks * BSIZE, BSIZE, cache_capacity=capacity)


def test_rejects_images_that_are_not_whole_blocks():
    with pytest.raises(BadImage):
        BlockDevice.from_memory(BSIZE * 3 + 1, BSIZE)
    with pytest.raises(BadImage):
        BlockDevice.from_memory(BSIZE * 4, 1000)


def test_out_of_range_blocks():
    dev = make_dev()
    with pytest.raises(OutOfRange):
        dev.read_block(16)
    with pytest.raises(OutOfRange):
        dev.bread(-1)


def test_write_through_buffer_reaches_image_on_sync():
    dev = make_dev()
    with dev.getblk(3) as bh:
        bh.write(10, b"hello")
    assert dev.read_block(3)[10:15] == bytes(5)
    dev.sync_all()
    assert dev.read_block(3)[10:15] == b"hello"


def test_read_lease_is_a_copy_and_cannot_be_dirtied():
    dev = make_dev()
    with dev.bread(2) as bh:
        data = bh.data
        assert isinstance(data, bytes)
        with pytest.raises(BlockDeviceError):
            bh.mark_dirty()


def test_buffer_unusable_after_release():
    dev = make_dev()
    bh = dev.getblk(1)
    bh.release()
    bh.release()
    with pytest.raises(BlockDeviceError):
        _ = bh.data


def test_dirty_block_written_back_on_eviction():
    dev = make_dev(capacity=2)
    with dev.getblk(5) as bh:
        bh.fill(b"x" * BSIZE)
    for blockno in (6, 7, 8):
        with dev.bread(blockno):
            pass
    assert dev.read_block(5) == b"x" * BSIZE
    assert len(dev.cache) <= 2


def test_pinned_block_is_not_evicted():
    dev = make_dev(capacity=1)
    with dev.getblk(4) as bh:
        bh.fill(b"p")
    dev.cache.pin(4)
    for blockno in (6, 7):
        with dev.bread(blockno):
            pass
    assert 4 in dev.cache
    assert dev.read_block(4) == bytes(BSIZE)
    dev.cache.unpin(4)


class StallingImage(MemoryImage):
    """Memory image whose first write of `stall_on` waits until released."""

    def __init__(self, data, stall_on: bytes):
        super().__init__(data)
        self.stall_on = stall_on
        self.entered = threading.Event()
        self.go = threading.Event()

    def pwrite(self, offset, data):
        if data == self.stall_on and not self.entered.is_set():
            self.entered.set()
            self.go.wait(5)
        super().pwrite(offset, data)


def test_newer_eviction_is_not_overwritten_by_a_slow_older_one():
    old, new = b"\x01" * BSIZE, b"\x02" * BSIZE
    image = StallingImage(16 * BSIZE, stall_on=old)
    dev = BlockDevice(image, BSIZE, cache_capacity=1)

    def evict_old():
        with dev.getblk(0) as bh:
            bh.fill(old)
        with dev.bread(1):
            pass

    def rewrite_and_evict():
        with dev.getblk(0) as bh:
            assert bh.data == old
            bh.fill(new)

    first = threading.Thread(target=evict_old)
    first.start()
    assert image.entered.wait(5)
    second = threading.Thread(target=rewrite_and_evict)
    second.start()
    second.join(timeout=0.2)
    image.go.set()
    first.join(5)
    second.join(5)
    assert not first.is_alive() and not second.is_alive()
    assert dev.read_block(0) == new


def test_trace_records_writes_and_flushes_in_order():
    dev = make_dev()
    dev.trace.start()
    dev.write_block(2, b"a" * BSIZE)
    dev.flush()
    dev.write_block(3, b"b" * BSIZE)
    events = dev.trace.stop()
    assert [e.kind for e in events] == ["W", "F", "W"]
    assert events[0].blockno == 2
    assert events[1].to_line() == "F"
    assert events[2].to_line().startswith("W 3 ")


def test_crash_injection_keeps_image_untouched():
    dev = make_dev()
    before = dev.snapshot()
    dev.arm_crash_injection()
    dev.write_block(1, b"z" * BSIZE)
    dev.flush()
    assert dev.read_block(1) == b"z" * BSIZE
    dev.disarm_crash_injection()
    assert dev.read_block(1) == before[BSIZE:2 * BSIZE]


def test_file_backed_device(tmp_path):
    path = create_image(tmp_path / "disk.img", 8 * BSIZE)
    dev = open_device(path, BSIZE)
    dev.write_block(7, b"q" * BSIZE)
    dev.flush()
    dev.close()
    reopened = open_device(path, BSIZE)
    assert reopened.read_block(7) == b"q" * BSIZE
    assert reopened.image_path == path
    reopened.close()
