"""Block device over a disk image, with a buffer cache and leased block handles."""

import hashlib
import logging
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Optional, Protocol, Union

from app.core.config import settings

logger = logging.getLogger(__name__)


class BlockDeviceError(Exception):
    """Exception raised when the block device cannot serve a request."""
    pass


class BadImage(BlockDeviceError):
    """Image length is not a positive multiple of the block size."""
    pass


class OutOfRange(BlockDeviceError):
    """Block number at or beyond block_count."""
    pass


class DeviceIoError(BlockDeviceError):
    """Host I/O on the backing image failed."""
    pass


# ---------------------------------------------------------------------------
# Backing images
# ---------------------------------------------------------------------------


class ImageBackend(Protocol):
    def size(self) -> int: ...
    def pread(self, offset: int, length: int) -> bytes: ...
    def pwrite(self, offset: int, data: bytes) -> None: ...
    def fsync(self) -> None: ...
    def close(self) -> None: ...


class FileImage:
    """Disk image stored in a host file, accessed with positional I/O."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        try:
            self._fd = os.open(self.path, os.O_RDWR)
        except OSError as e:
            raise DeviceIoError(f"cannot open image {self.path}: {e}") from e

    def size(self) -> int:
        return os.fstat(self._fd).st_size

    def pread(self, offset: int, length: int) -> bytes:
        data = os.pread(self._fd, length, offset)
        if len(data) < length:
            data += bytes(length - len(data))
        return data

    def pwrite(self, offset: int, data: bytes) -> None:
        os.pwrite(self._fd, data, offset)

    def fsync(self) -> None:
        os.fsync(self._fd)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


class MemoryImage:
    """Disk image held in memory; used for crash states and benchmarks."""

    def __init__(self, data: Union[bytes, bytearray, int]):
        self._buf = bytearray(data)
        self._lock = threading.Lock()

    def size(self) -> int:
        return len(self._buf)

    def pread(self, offset: int, length: int) -> bytes:
        with self._lock:
            return bytes(self._buf[offset:offset + length])

    def pwrite(self, offset: int, data: bytes) -> None:
        with self._lock:
            self._buf[offset:offset + len(data)] = data

    def fsync(self) -> None:
        pass

    def close(self) -> None:
        pass

    def snapshot(self) -> bytes:
        with self._lock:
            return bytes(self._buf)


def create_image(path: Union[str, Path], size: int) -> Path:
    """Create (or truncate) a zero-filled image file of `size` bytes."""
    path = Path(path)
    with open(path, "wb") as f:
        f.truncate(size)
    return path


# ---------------------------------------------------------------------------
# Write trace
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceEvent:
    """One image write or durability flush, in issue order."""

    kind: Literal["W", "F"]
    blockno: int = -1
    data: bytes = b""

    @property
    def digest(self) -> str:
        return hashlib.blake2b(self.data, digest_size=8).hexdigest()

    def to_line(self) -> str:
        if self.kind == "F":
            return "F"
        return f"W {self.blockno} {self.digest}"


class WriteTrace:
    """Ordered log of the writes and flushes the device issues to its image."""

    def __init__(self):
        self.recording = False
        self._events: list[TraceEvent] = []
        self._lock = threading.Lock()

    def start(self) -> None:
        with self._lock:
            self._events.clear()
            self.recording = True

    def stop(self) -> list[TraceEvent]:
        with self._lock:
            self.recording = False
            return list(self._events)

    @property
    def events(self) -> list[TraceEvent]:
        with self._lock:
            return list(self._events)

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)

    def record_write(self, blockno: int, data: bytes) -> None:
        with self._lock:
            if self.recording:
                self._events.append(TraceEvent("W", blockno, bytes(data)))

    def record_flush(self) -> None:
        with self._lock:
            if self.recording:
                self._events.append(TraceEvent("F"))

    def to_lines(self) -> list[str]:
        return [event.to_line() for event in self.events]


# ---------------------------------------------------------------------------
# Buffer cache
# ---------------------------------------------------------------------------


@dataclass
class _Entry:
    blockno: int
    data: bytearray = field(default_factory=bytearray)
    dirty: bool = False
    readers: int = 0
    writer: bool = False
    pins: int = 0
    loading: bool = True

    @property
    def leased(self) -> bool:
        return self.writer or self.readers > 0


class BufferHead:
    """
    Leased view of one cached block.

    Read leases see an immutable copy; the single writable lease gets the
    cached bytearray itself. The lease ends on release() or when the
    context manager exits, whichever comes first.
    """

    def __init__(self, cache: "BufferCache", entry: _Entry, writable: bool):
        self._cache = cache
        self._entry = entry
        self.blockno = entry.blockno
        self.writable = writable
        self._released = False

    @property
    def data(self) -> Union[bytes, bytearray]:
        if self._released:
            raise BlockDeviceError(f"buffer {self.blockno} used after release")
        if self.writable:
            return self._entry.data
        return bytes(self._entry.data)

    @property
    def dirty(self) -> bool:
        return self._entry.dirty

    @property
    def released(self) -> bool:
        return self._released

    def mark_dirty(self) -> None:
        if not self.writable:
            raise BlockDeviceError(f"buffer {self.blockno} is leased read-only")
        self._entry.dirty = True

    def write(self, offset: int, payload: bytes) -> None:
        """Overwrite bytes at offset and mark the buffer dirty."""
        buf = self.data
        if offset < 0 or offset + len(payload) > len(buf):
            raise BlockDeviceError(f"write of {len(payload)} bytes at {offset} overflows block")
        buf[offset:offset + len(payload)] = payload
        self.mark_dirty()

    def fill(self, payload: bytes) -> None:
        """Replace the whole block; short payloads are zero-padded."""
        buf = self.data
        if len(payload) > len(buf):
            raise BlockDeviceError("payload larger than block")
        buf[:] = payload + bytes(len(buf) - len(payload))
        self.mark_dirty()

    def release(self) -> None:
        """End the lease. Idempotent."""
        if self._released:
            return
        self._released = True
        self._cache._release(self._entry, self.writable)

    def __enter__(self) -> "BufferHead":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.release()


class BufferCache:
    """
    Block cache with lease accounting and least-recently-released eviction.

    Entries pinned by the journal are never evicted; unpinned dirty entries
    are written to the image before they leave the cache.
    """

    def __init__(self, device: "BlockDevice", capacity: int):
        if capacity < 1:
            raise ValueError("cache capacity must be at least 1")
        self._device = device
        self.capacity = capacity
        self._cond = threading.Condition(threading.Lock())
        self._entries: dict[int, _Entry] = {}
        self._lru: "OrderedDict[int, None]" = OrderedDict()
        self._writeback: dict[int, bytes] = {}
        self._inflight: set[int] = set()

    def __len__(self) -> int:
        with self._cond:
            return len(self._entries)

    def __contains__(self, blockno: int) -> bool:
        with self._cond:
            return blockno in self._entries

    def acquire(self, blockno: int, writable: bool) -> BufferHead:
        with self._cond:
            while True:
                entry = self._entries.get(blockno)
                if entry is None:
                    entry = _Entry(blockno)
                    self._entries[blockno] = entry
                    self._grant(entry, writable)
                    pending = self._writeback.get(blockno)
                    break
                if entry.loading:
                    self._cond.wait()
                    continue
                if entry.writer or (writable and entry.readers):
                    self._cond.wait()
                    continue
                self._grant(entry, writable)
                return BufferHead(self, entry, writable)

        try:
            data = pending if pending is not None else self._device._read_image(blockno)
        except BaseException:
            with self._cond:
                del self._entries[blockno]
                self._cond.notify_all()
            raise

        with self._cond:
            entry.data = bytearray(data)
            entry.loading = False
            self._cond.notify_all()
            victims = self._collect_victims()
        self._write_back(victims)
        return BufferHead(self, entry, writable)

    def _grant(self, entry: _Entry, writable: bool) -> None:
        if writable:
            entry.writer = True
        else:
            entry.readers += 1
        self._lru.pop(entry.blockno, None)

    def _release(self, entry: _Entry, writable: bool) -> None:
        with self._cond:
            if writable:
                entry.writer = False
            else:
                entry.readers -= 1
            if not entry.leased and self._entries.get(entry.blockno) is entry:
                self._lru[entry.blockno] = None
                self._lru.move_to_end(entry.blockno)
            self._cond.notify_all()
            victims = self._collect_victims()
        self._write_back(victims)

    def _collect_victims(self) -> list[int]:
        victims: list[int] = []
        if len(self._entries) <= self.capacity:
            return victims
        for blockno in list(self._lru):
            if len(self._entries) <= self.capacity:
                break
            entry = self._entries[blockno]
            if entry.leased or entry.pins or entry.loading:
                continue
            del self._entries[blockno]
            del self._lru[blockno]
            if entry.dirty:
                self._writeback[blockno] = bytes(entry.data)
                victims.append(blockno)
        return victims

    def _write_back(self, victims: Iterable[int]) -> None:
        """
        Write evicted blocks home. One write per block is in flight at a
        time, and it carries the newest evicted contents, so an older copy
        never lands after a newer one.
        """
        for blockno in victims:
            with self._cond:
                while blockno in self._inflight:
                    self._cond.wait()
                data = self._writeback.get(blockno)
                if data is None:
                    continue
                self._inflight.add(blockno)
            logger.debug("evicting dirty block %d", blockno)
            try:
                self._device._write_image(blockno, data)
            finally:
                with self._cond:
                    self._inflight.discard(blockno)
                    if self._writeback.get(blockno) is data:
                        del self._writeback[blockno]
                    self._cond.notify_all()

    def pin(self, blockno: int) -> None:
        with self._cond:
            entry = self._entries.get(blockno)
            if entry is not None:
                entry.pins += 1

    def unpin(self, blockno: int) -> None:
        with self._cond:
            entry = self._entries.get(blockno)
            if entry is not None and entry.pins > 0:
                entry.pins -= 1
            victims = self._collect_victims()
        self._write_back(victims)

    def drop(self, blockno: int) -> None:
        """Forget a block's cached contents without writing them anywhere."""
        with self._cond:
            entry = self._entries.get(blockno)
            if entry is None:
                return
            entry.pins = 0
            entry.dirty = False
            if not entry.leased and not entry.loading:
                del self._entries[blockno]
                self._lru.pop(blockno, None)

    def note_written(self, blockno: int, data: bytes) -> None:
        """Keep a cached copy coherent after a direct image write."""
        with self._cond:
            entry = self._entries.get(blockno)
            if entry is None or entry.loading:
                return
            if entry.data == data:
                entry.dirty = False
            elif not entry.dirty and not entry.leased:
                entry.data[:] = data

    def dirty_snapshot(self) -> list[tuple[int, bytes]]:
        """Unpinned dirty blocks in ascending order, copied under the cache lock."""
        with self._cond:
            return sorted(
                (blockno, bytes(entry.data))
                for blockno, entry in self._entries.items()
                if entry.dirty and not entry.pins and not entry.loading
            )

    def mark_clean(self, blockno: int, data: bytes) -> None:
        with self._cond:
            entry = self._entries.get(blockno)
            if entry is not None and entry.data == data:
                entry.dirty = False

    def invalidate_all(self) -> None:
        with self._cond:
            for blockno, entry in list(self._entries.items()):
                if entry.leased or entry.loading:
                    continue
                del self._entries[blockno]
                self._lru.pop(blockno, None)


# ---------------------------------------------------------------------------
# Block device
# ---------------------------------------------------------------------------


@dataclass
class DeviceStats:
    image_reads: int = 0
    image_writes: int = 0
    flushes: int = 0


class BlockDevice:
    """
    Fixed-geometry block device over an image backend.

    All methods are thread-safe. With crash injection armed, writes are
    traced and served back to readers but never reach the image.
    """

    def __init__(
        self,
        backend: ImageBackend,
        block_size: int = settings.BLOCK_SIZE,
        cache_capacity: int = settings.CACHE_CAPACITY,
        name: str = "",
    ):
        if block_size <= 0 or block_size & (block_size - 1):
            raise BadImage(f"block size {block_size} is not a power of two")
        size = backend.size()
        if size == 0 or size % block_size:
            backend.close()
            raise BadImage(f"image of {size} bytes is not a multiple of {block_size}")
        self._backend = backend
        self.block_size = block_size
        self.block_count = size // block_size
        self.name = name
        self.trace = WriteTrace()
        self.stats = DeviceStats()
        self.cache = BufferCache(self, cache_capacity)
        self._shadow: Optional[dict[int, bytes]] = None
        self._closed = False

    @classmethod
    def from_memory(
        cls,
        data: Union[bytes, bytearray, int],
        block_size: int = settings.BLOCK_SIZE,
        cache_capacity: int = settings.CACHE_CAPACITY,
    ) -> "BlockDevice":
        return cls(MemoryImage(data), block_size, cache_capacity, name="memory")

    @property
    def image_path(self) -> Optional[Path]:
        return getattr(self._backend, "path", None)

    # -- crash injection -------------------------------------------------

    def arm_crash_injection(self) -> None:
        """Keep tracing writes but stop them from reaching the image."""
        self._shadow = {}

    def disarm_crash_injection(self) -> None:
        self._shadow = None

    @property
    def crash_injection_armed(self) -> bool:
        return self._shadow is not None

    # -- raw image I/O ---------------------------------------------------

    def _check(self, blockno: int) -> None:
        if self._closed:
            raise DeviceIoError(f"device {self.name} is closed")
        if not 0 <= blockno < self.block_count:
            raise OutOfRange(f"block {blockno} outside [0, {self.block_count})")

    def _read_image(self, blockno: int) -> bytes:
        shadow = self._shadow
        if shadow is not None and blockno in shadow:
            return shadow[blockno]
        self.stats.image_reads += 1
        try:
            return self._backend.pread(blockno * self.block_size, self.block_size)
        except OSError as e:
            raise DeviceIoError(f"read of block {blockno} failed: {e}") from e

    def _write_image(self, blockno: int, data: bytes) -> None:
        if len(data) != self.block_size:
            raise BlockDeviceError(f"write of {len(data)} bytes to block {blockno}")
        self.trace.record_write(blockno, data)
        self.stats.image_writes += 1
        shadow = self._shadow
        if shadow is not None:
            shadow[blockno] = bytes(data)
            return
        try:
            self._backend.pwrite(blockno * self.block_size, data)
        except OSError as e:
            raise DeviceIoError(f"write of block {blockno} failed: {e}") from e

    def read_block(self, blockno: int) -> bytes:
        """Read a block straight from the image, bypassing the cache."""
        self._check(blockno)
        return self._read_image(blockno)

    def write_block(self, blockno: int, data: bytes) -> None:
        """Write a block straight to the image (no flush)."""
        self._check(blockno)
        data = bytes(data)
        self._write_image(blockno, data)
        self.cache.note_written(blockno, data)

    def flush(self) -> None:
        """Durability barrier for every write issued so far."""
        if self._closed:
            raise DeviceIoError(f"device {self.name} is closed")
        self.trace.record_flush()
        self.stats.flushes += 1
        if self._shadow is not None:
            return
        try:
            self._backend.fsync()
        except OSError as e:
            raise DeviceIoError(f"flush failed: {e}") from e

    # -- buffer API ------------------------------------------------------

    def bread(self, blockno: int) -> BufferHead:
        """Read lease on a block."""
        self._check(blockno)
        return self.cache.acquire(blockno, writable=False)

    def getblk(self, blockno: int) -> BufferHead:
        """Writable lease on a block; waits until no other lease is live."""
        self._check(blockno)
        return self.cache.acquire(blockno, writable=True)

    def sync_dirty_buffer(self, bh: BufferHead) -> None:
        """Write one dirty buffer to its home location and flush."""
        if not bh.writable or bh.released:
            raise BlockDeviceError(f"sync of block {bh.blockno} requires a live writable lease")
        if not bh.dirty:
            return
        data = bytes(bh.data)
        self._write_image(bh.blockno, data)
        self.flush()
        self.cache.mark_clean(bh.blockno, data)

    def sync_all(self) -> None:
        """Write every unpinned dirty block in ascending order, then flush once."""
        snapshot = self.cache.dirty_snapshot()
        for blockno, data in snapshot:
            self._write_image(blockno, data)
        self.flush()
        for blockno, data in snapshot:
            self.cache.mark_clean(blockno, data)

    def release(self, bh: BufferHead) -> None:
        bh.release()

    def snapshot(self) -> bytes:
        """Full image contents as the image currently holds them (shadow included)."""
        data = bytearray()
        for blockno in range(self.block_count):
            data += self._read_image(blockno)
        return bytes(data)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._backend.close()

    def __repr__(self) -> str:
        return f"BlockDevice({self.name!r}, blocks={self.block_count}, bsize={self.block_size})"


def open_device(
    image_path: Union[str, Path],
    block_size: int = settings.BLOCK_SIZE,
    cache_capacity: int = settings.CACHE_CAPACITY,
) -> BlockDevice:
    """
    Open a file-backed block device.

    Raises:
        BadImage: If the image length is not a multiple of block_size
        DeviceIoError: If the image cannot be opened
    """
    backend = FileImage(image_path)
    device = BlockDevice(backend, block_size, cache_capacity, name=str(image_path))
    logger.debug("opened %r", device)
    return device
