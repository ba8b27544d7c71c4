"""
Hash-indexed directory tree.

A directory's logical block 0 is the index root: a sorted table of
(hash_lo, leaf block) pairs partitioning the 32-bit FNV-1a hash space.
Every other block is a leaf of directory records. Lookups read the index
root and one leaf; full leaves split at their median hash.

    index root   {magic u32, nleaves u32, entry_count u32, 0 u32} + {hash_lo u32, lblk u32}*
    leaf         {magic u32, count u16, used u16} + {ino u32, name_len u8, name, pad to 4}*
"""

import bisect
import errno
import logging
import struct
import zlib
from dataclasses import dataclass
from typing import Iterator, Optional, Protocol

from app.core.errors import FsError

logger = logging.getLogger(__name__)

INDEX_MAGIC = 0x58444E49  # "INDX"
LEAF_MAGIC = 0x4641454C  # "LEAF"
NAME_MAX = 255

_INDEX_HEADER = struct.Struct("<IIII")
_INDEX_ENTRY = struct.Struct("<II")
_LEAF_HEADER = struct.Struct("<IHH")
_RECORD_HEAD = struct.Struct("<IB")

_FNV_OFFSET = 0x811C9DC5
_FNV_PRIME = 0x01000193
_COOKIE_LOW = (1 << 30) - 1


def name_hash(name: bytes) -> int:
    """32-bit FNV-1a of a name's bytes."""
    h = _FNV_OFFSET
    for byte in name:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFF
    return h


def readdir_cookie(name: bytes) -> int:
    """Readdir offset of a name: its hash, then 30 bits of its CRC-32, plus one."""
    return ((name_hash(name) << 30) | (zlib.crc32(name) & _COOKIE_LOW)) + 1


def readdir_cookie_hash(cookie: int) -> int:
    return max(cookie - 1, 0) >> 30


def encode_name(name: str) -> bytes:
    """
    Validate a user-supplied name and return its on-disk bytes.

    Raises:
        FsError: ENAMETOOLONG above 255 bytes, EINVAL for empty names or
            names containing '/' or NUL
    """
    raw = name.encode("utf-8", "surrogateescape")
    if len(raw) > NAME_MAX:
        raise FsError(errno.ENAMETOOLONG, name[:32])
    if not raw or b"/" in raw or b"\0" in raw:
        raise FsError(errno.EINVAL, f"invalid name {name!r}")
    return raw


def decode_name(raw: bytes) -> str:
    return raw.decode("utf-8", "surrogateescape")


def record_size(name: bytes) -> int:
    return (_RECORD_HEAD.size + len(name) + 3) & ~3


class DirStore(Protocol):
    """Logical blocks of one directory."""

    def read_block(self, lblk: int) -> bytes: ...
    def write_block(self, lblk: int, data: bytes) -> None: ...
    def append_block(self) -> int: ...


@dataclass
class _Leaf:
    lblk: int
    records: list[tuple[int, bytes]]  # (ino, name), kept sorted by (hash, name)

    def used(self) -> int:
        return _LEAF_HEADER.size + sum(record_size(name) for _, name in self.records)


def _sort_key(record: tuple[int, bytes]) -> tuple[int, bytes]:
    return name_hash(record[1]), record[1]


class DirTree:
    """
    Directory operations over a DirStore.

    The caller serializes access per directory (the directory inode's lock)
    and supplies a store whose writes are journaled.
    """

    def __init__(self, store: DirStore, block_size: int):
        self.store = store
        self.block_size = block_size
        self.max_index = (block_size - _INDEX_HEADER.size) // _INDEX_ENTRY.size
        self._index: Optional[list[tuple[int, int]]] = None
        self._count = 0

    # ------------------------------------------------------------------
    # Codecs
    # ------------------------------------------------------------------

    def _load_index(self) -> list[tuple[int, int]]:
        if self._index is None:
            raw = self.store.read_block(0)
            magic, nleaves, count, _ = _INDEX_HEADER.unpack_from(raw)
            if magic != INDEX_MAGIC or nleaves == 0 or nleaves > self.max_index:
                raise FsError(errno.EIO, "directory index root is corrupt")
            self._index = [
                _INDEX_ENTRY.unpack_from(raw, _INDEX_HEADER.size + i * _INDEX_ENTRY.size)
                for i in range(nleaves)
            ]
            self._count = count
        return self._index

    def _store_index(self) -> None:
        block = bytearray(self.block_size)
        _INDEX_HEADER.pack_into(block, 0, INDEX_MAGIC, len(self._index), self._count, 0)
        for i, (hash_lo, lblk) in enumerate(self._index):
            _INDEX_ENTRY.pack_into(block, _INDEX_HEADER.size + i * _INDEX_ENTRY.size, hash_lo, lblk)
        self.store.write_block(0, bytes(block))

    def _read_leaf(self, lblk: int) -> _Leaf:
        raw = self.store.read_block(lblk)
        magic, count, _ = _LEAF_HEADER.unpack_from(raw)
        if magic != LEAF_MAGIC:
            raise FsError(errno.EIO, f"directory leaf {lblk} is corrupt")
        records = []
        pos = _LEAF_HEADER.size
        for _ in range(count):
            ino, name_len = _RECORD_HEAD.unpack_from(raw, pos)
            start = pos + _RECORD_HEAD.size
            name = bytes(raw[start:start + name_len])
            if name_len == 0 or start + name_len > self.block_size:
                raise FsError(errno.EIO, f"directory leaf {lblk} has a bad record")
            records.append((ino, name))
            pos += record_size(name)
        return _Leaf(lblk, records)

    def _write_leaf(self, leaf: _Leaf) -> None:
        block = bytearray(self.block_size)
        used = leaf.used()
        if used > self.block_size:
            raise FsError(errno.EIO, "directory leaf overflow")
        _LEAF_HEADER.pack_into(block, 0, LEAF_MAGIC, len(leaf.records), used)
        pos = _LEAF_HEADER.size
        for ino, name in leaf.records:
            _RECORD_HEAD.pack_into(block, pos, ino, len(name))
            block[pos + _RECORD_HEAD.size:pos + _RECORD_HEAD.size + len(name)] = name
            pos += record_size(name)
        self.store.write_block(leaf.lblk, bytes(block))

    def _slot(self, h: int) -> int:
        index = self._load_index()
        return bisect.bisect_right(index, (h, 0xFFFFFFFF)) - 1

    # ------------------------------------------------------------------
    # Operations
    # ------------------------------------------------------------------

    def format(self, self_ino: int, parent_ino: int) -> None:
        """Lay out an empty directory holding "." and ".."."""
        root = self.store.append_block()
        leaf_lblk = self.store.append_block()
        if root != 0:
            raise FsError(errno.EIO, "directory already has blocks")
        records = sorted([(self_ino, b"."), (parent_ino, b"..")], key=_sort_key)
        self._write_leaf(_Leaf(leaf_lblk, records))
        self._index = [(0, leaf_lblk)]
        self._count = 2
        self._store_index()

    @property
    def count(self) -> int:
        self._load_index()
        return self._count

    def is_empty(self) -> bool:
        return self.count <= 2

    def lookup(self, name: bytes) -> Optional[int]:
        """Inode number for name, or None."""
        index = self._load_index()
        leaf = self._read_leaf(index[self._slot(name_hash(name))][1])
        for ino, entry in leaf.records:
            if entry == name:
                return ino
        return None

    def needs_split(self, name: bytes) -> bool:
        """True when inserting name would have to split its leaf."""
        index = self._load_index()
        leaf = self._read_leaf(index[self._slot(name_hash(name))][1])
        return leaf.used() + record_size(name) > self.block_size

    def insert(self, name: bytes, ino: int) -> None:
        """
        Add an entry.

        Each split is stored before the next begins, so a failure part way
        leaves a valid tree without the new entry.

        Raises:
            FsError: EEXIST if present, ENOSPC if the index is full
        """
        h = name_hash(name)
        index = self._load_index()
        slot = self._slot(h)
        leaf = self._read_leaf(index[slot][1])
        if any(entry == name for _, entry in leaf.records):
            raise FsError(errno.EEXIST, decode_name(name))

        while leaf.used() + record_size(name) > self.block_size:
            leaf = self._split(slot, leaf, h)
            slot = self._slot(h)

        bisect.insort(leaf.records, (ino, name), key=_sort_key)
        self._write_leaf(leaf)
        self._count += 1
        self._store_index()

    def _split(self, slot: int, leaf: _Leaf, h: int) -> _Leaf:
        """Split a full leaf at its median hash; returns the half covering h."""
        index = self._index
        if len(index) >= self.max_index:
            raise FsError(errno.ENOSPC, "directory index is full")
        hashes = [name_hash(name) for _, name in leaf.records]
        lo = index[slot][0]
        median = hashes[len(hashes) // 2]
        split = median if median > lo else next((x for x in hashes if x > lo), None)
        if split is None:
            if h > lo:
                split = h
            else:
                raise FsError(errno.ENOSPC, "directory leaf full of colliding names")

        new_lblk = self.store.append_block()
        left = _Leaf(leaf.lblk, [r for r, x in zip(leaf.records, hashes) if x < split])
        right = _Leaf(new_lblk, [r for r, x in zip(leaf.records, hashes) if x >= split])
        self._write_leaf(left)
        self._write_leaf(right)
        index.insert(slot + 1, (split, new_lblk))
        self._store_index()
        logger.debug("split directory leaf %d at hash %#x into %d", leaf.lblk, split, new_lblk)
        return right if h >= split else left

    def remove(self, name: bytes) -> int:
        """
        Remove an entry and return the inode it named.

        Raises:
            FsError: ENOENT
        """
        index = self._load_index()
        leaf = self._read_leaf(index[self._slot(name_hash(name))][1])
        for i, (ino, entry) in enumerate(leaf.records):
            if entry == name:
                del leaf.records[i]
                self._write_leaf(leaf)
                self._count -= 1
                self._store_index()
                return ino
        raise FsError(errno.ENOENT, decode_name(name))

    def replace(self, name: bytes, ino: int) -> int:
        """
        Point an existing entry at another inode; returns the previous one.

        Raises:
            FsError: ENOENT
        """
        index = self._load_index()
        leaf = self._read_leaf(index[self._slot(name_hash(name))][1])
        for i, (old, entry) in enumerate(leaf.records):
            if entry == name:
                leaf.records[i] = (ino, name)
                self._write_leaf(leaf)
                return old
        raise FsError(errno.ENOENT, decode_name(name))

    def entries(self, after: int = 0) -> Iterator[tuple[int, bytes, int]]:
        """
        Entries in cookie order as (cookie, name, ino); `after` resumes just
        past a prior entry.

        A cookie depends only on its entry's name, so entries added or
        removed between calls never shift where a listing resumes. Names
        whose cookies collide in all 62 bits list together, and a resume
        between them skips the rest of that group.
        """
        index = self._load_index()
        start = bisect.bisect_right(index, (readdir_cookie_hash(after), 0xFFFFFFFF)) - 1
        for _, lblk in index[max(start, 0):]:
            leaf = self._read_leaf(lblk)
            for cookie, name, ino in sorted((readdir_cookie(name), name, ino) for ino, name in leaf.records):
                if cookie > after:
                    yield cookie, name, ino

    def leaves(self) -> list[tuple[int, int, int]]:
        """Index layout as (hash_lo, hash_hi_exclusive, lblk)."""
        index = self._load_index()
        bounds = [lo for lo, _ in index[1:]] + [1 << 32]
        return [(lo, hi, lblk) for (lo, lblk), hi in zip(index, bounds)]

    def check(self) -> list[str]:
        """Structural problems: misplaced entries, unsorted index, bad counts, duplicates."""
        problems = []
        try:
            layout = self.leaves()
        except FsError as e:
            return [str(e)]
        if layout[0][0] != 0:
            problems.append("index does not start at hash 0")
        if any(a[0] >= b[0] for a, b in zip(layout, layout[1:])):
            problems.append("index hashes not strictly increasing")
        seen: set[bytes] = set()
        total = 0
        for lo, hi, lblk in layout:
            try:
                leaf = self._read_leaf(lblk)
            except FsError as e:
                problems.append(str(e))
                continue
            for _, name in leaf.records:
                h = name_hash(name)
                if not lo <= h < hi:
                    problems.append(f"entry {decode_name(name)!r} hash {h:#x} outside leaf [{lo:#x}, {hi:#x})")
                if name in seen:
                    problems.append(f"duplicate entry {decode_name(name)!r}")
                seen.add(name)
                total += 1
        if total != self._count:
            problems.append(f"index counts {self._count} entries, leaves hold {total}")
        if b"." not in seen or b".." not in seen:
            problems.append("missing '.' or '..'")
        return problems


def scan_records(block: bytes) -> list[tuple[int, bytes]]:
    """Raw records of one leaf block, without going through an index."""
    magic, count, _ = _LEAF_HEADER.unpack_from(block)
    if magic != LEAF_MAGIC:
        return []
    records = []
    pos = _LEAF_HEADER.size
    for _ in range(count):
        ino, name_len = _RECORD_HEAD.unpack_from(block, pos)
        start = pos + _RECORD_HEAD.size
        records.append((ino, bytes(block[start:start + name_len])))
        pos += (_RECORD_HEAD.size + name_len + 3) & ~3
    return records
