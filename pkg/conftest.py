"""Shared fixtures for the bentoframe test suite."""

import itertools
from contextlib import ExitStack
from functools import lru_cache

import pytest

from app.harness.session import format_memory_image, mounted
from app.harness.workload import WorkloadRunner
from app.models.schemas import MountOptions
from app.services.blockdev import BlockDevice

SMALL_BLOCKS = 512
SMALL_BSIZE = 1024


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running property and load tests")


@lru_cache(maxsize=None)
def blank_image(total_blocks: int = SMALL_BLOCKS, block_size: int = SMALL_BSIZE) -> bytes:
    return format_memory_image(total_blocks, block_size)


class FakeClock:
    """Deterministic nanosecond clock that ticks by one microsecond per read."""

    def __init__(self, start: int = 1_700_000_000_000_000_000):
        self._ticks = itertools.count(start, 1000)

    def __call__(self) -> int:
        return next(self._ticks)


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def device():
    """A freshly formatted 512 KiB memory device."""
    return BlockDevice.from_memory(blank_image(), SMALL_BSIZE)


@pytest.fixture
def mount():
    """
    Factory mounting a device (or image bytes) and unmounting at teardown.

    mount(dev, variant="bentofs", **options) -> Connection
    """
    with ExitStack() as stack:
        def _mount(target=None, variant="bentofs", clock=None, **options):
            if target is None:
                target = BlockDevice.from_memory(blank_image(), SMALL_BSIZE)
            elif isinstance(target, (bytes, bytearray)):
                target = BlockDevice.from_memory(target, SMALL_BSIZE)
            opts = MountOptions(**options)
            return stack.enter_context(mounted(target, variant, opts, name=f"test-{variant}", clock=clock))
        yield _mount


@pytest.fixture
def conn(mount):
    return mount()


@pytest.fixture
def runner(conn):
    r = WorkloadRunner(conn)
    yield r
    r.close_all()
