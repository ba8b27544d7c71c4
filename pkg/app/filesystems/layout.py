"""
On-disk format of Bento-fs and the mkfs that writes it.

Little-endian throughout. Block 0 is reserved, the superblock lives in
block 1, then the journal, the inode bitmap, the block bitmap, the inode
table and the data region. Inode bitmaps are indexed by inode number and
block bitmaps by absolute block number.
"""

import logging
import math
import struct
from dataclasses import dataclass, field, fields
from enum import IntEnum
from typing import Callable, Optional

from app.core.config import settings
from app.models.schemas import FileAttr, FileKind
from app.services.blockdev import BlockDevice
from app.services.journal import Journal
from app.filesystems.dirtree import DirTree

logger = logging.getLogger(__name__)

FS_MAGIC = 0x42454E54  # "BENT"
FORMAT_VERSION = 1
SUPERBLOCK_BLOCKNO = 1
ROOT_INO = 1
PROV_INO = 2
INODE_SIZE = 128
NDIRECT = 12
MAX_FILE_SIZE = 1 << 32
MIN_FS_JOURNAL_LEN = 32

Clock = Callable[[], int]


class LayoutError(Exception):
    """Exception raised when an image does not hold a usable Bento-fs format."""
    pass


class DeviceTooSmall(LayoutError):
    pass


class BadMagic(LayoutError):
    pass


class InodeKind(IntEnum):
    FREE = 0
    REGULAR = 1
    DIRECTORY = 2
    SYMLINK = 3

    @property
    def file_kind(self) -> FileKind:
        return _TO_FILE_KIND[self]


_TO_FILE_KIND = {
    InodeKind.REGULAR: FileKind.REGULAR,
    InodeKind.DIRECTORY: FileKind.DIRECTORY,
    InodeKind.SYMLINK: FileKind.SYMLINK,
}


# ---------------------------------------------------------------------------
# Superblock
# ---------------------------------------------------------------------------


_SUPER = struct.Struct("<16I")


@dataclass
class Superblock:
    block_size: int
    total_blocks: int
    inode_count: int
    journal_start: int
    journal_len: int
    inode_bitmap_start: int
    inode_bitmap_len: int
    block_bitmap_start: int
    block_bitmap_len: int
    inode_table_start: int
    inode_table_len: int
    data_start: int
    root_ino: int = ROOT_INO
    prov_ino: int = PROV_INO
    version: int = FORMAT_VERSION
    magic: int = FS_MAGIC

    @property
    def max_ino(self) -> int:
        """Highest inode number; ino 2 is reserved outside inode_count."""
        return self.inode_count + 1

    @property
    def inodes_per_block(self) -> int:
        return self.block_size // INODE_SIZE

    @property
    def pointers_per_block(self) -> int:
        return self.block_size // 4

    @property
    def max_file_size(self) -> int:
        p = self.pointers_per_block
        return min(MAX_FILE_SIZE, (NDIRECT + p + p * p) * self.block_size)

    def inode_location(self, ino: int) -> tuple[int, int]:
        """(block number, byte offset) of an inode's table slot."""
        per = self.inodes_per_block
        return self.inode_table_start + ino // per, (ino % per) * INODE_SIZE

    def metadata_regions(self) -> list[tuple[str, int, int]]:
        return [
            ("reserved", 0, 1),
            ("superblock", SUPERBLOCK_BLOCKNO, 1),
            ("journal", self.journal_start, self.journal_len),
            ("inode_bitmap", self.inode_bitmap_start, self.inode_bitmap_len),
            ("block_bitmap", self.block_bitmap_start, self.block_bitmap_len),
            ("inode_table", self.inode_table_start, self.inode_table_len),
        ]

    def pack(self) -> bytes:
        block = bytearray(self.block_size)
        _SUPER.pack_into(
            block, 0, self.magic, self.version, self.block_size, self.total_blocks,
            self.inode_count, self.journal_start, self.journal_len,
            self.inode_bitmap_start, self.inode_bitmap_len,
            self.block_bitmap_start, self.block_bitmap_len,
            self.inode_table_start, self.inode_table_len,
            self.data_start, self.root_ino, self.prov_ino,
        )
        return bytes(block)

    @classmethod
    def unpack(cls, raw: bytes) -> "Superblock":
        """
        Raises:
            BadMagic: If the block does not hold a Bento-fs superblock
        """
        (magic, version, block_size, total_blocks, inode_count, journal_start, journal_len,
         ibm_start, ibm_len, bbm_start, bbm_len, itable_start, itable_len,
         data_start, root_ino, prov_ino) = _SUPER.unpack_from(raw)
        if magic != FS_MAGIC:
            raise BadMagic(f"superblock magic {magic:#x} is not {FS_MAGIC:#x}")
        if version != FORMAT_VERSION:
            raise BadMagic(f"unsupported format version {version}")
        return cls(
            block_size, total_blocks, inode_count, journal_start, journal_len,
            ibm_start, ibm_len, bbm_start, bbm_len, itable_start, itable_len,
            data_start, root_ino, prov_ino, version, magic,
        )

    def validate(self) -> list[str]:
        """Region problems: overlap or extent past the device end."""
        problems = []
        regions = self.metadata_regions() + [("data", self.data_start, self.total_blocks - self.data_start)]
        for name, start, length in regions:
            if length < 0 or start + length > self.total_blocks:
                problems.append(f"{name} region [{start}, {start + length}) exceeds {self.total_blocks} blocks")
        ordered = sorted(regions, key=lambda r: r[1])
        for (a, sa, la), (b, sb, _) in zip(ordered, ordered[1:]):
            if sa + la > sb:
                problems.append(f"{a} region overlaps {b}")
        if self.journal_len < MIN_FS_JOURNAL_LEN:
            problems.append(f"journal of {self.journal_len} blocks is too small")
        if self.inode_table_len * self.inodes_per_block < self.max_ino + 1:
            problems.append("inode table too small for inode_count")
        return problems


# ---------------------------------------------------------------------------
# Inodes
# ---------------------------------------------------------------------------


_INODE = struct.Struct("<HHIQII" + "qIqIqI" + f"{NDIRECT}I" + "IIII" + "4x")


def split_ns(ns: int) -> tuple[int, int]:
    return ns // 1_000_000_000, ns % 1_000_000_000


@dataclass
class DiskInode:
    kind: InodeKind = InodeKind.FREE
    perm: int = 0
    nlink: int = 0
    size: int = 0
    uid: int = 0
    gid: int = 0
    atime_ns: int = 0
    mtime_ns: int = 0
    ctime_ns: int = 0
    direct: list[int] = field(default_factory=lambda: [0] * NDIRECT)
    indirect: int = 0
    dindirect: int = 0
    blocks: int = 0
    generation: int = 0

    def pack(self) -> bytes:
        return _INODE.pack(
            int(self.kind), self.perm, self.nlink, self.size, self.uid, self.gid,
            *split_ns(self.atime_ns), *split_ns(self.mtime_ns), *split_ns(self.ctime_ns),
            *self.direct, self.indirect, self.dindirect, self.blocks, self.generation,
        )

    @classmethod
    def unpack(cls, raw: bytes, offset: int = 0) -> "DiskInode":
        values = _INODE.unpack_from(raw, offset)
        kind, perm, nlink, size, uid, gid = values[:6]
        a_s, a_n, m_s, m_n, c_s, c_n = values[6:12]
        direct = list(values[12:12 + NDIRECT])
        indirect, dindirect, blocks, generation = values[12 + NDIRECT:]
        try:
            kind = InodeKind(kind)
        except ValueError:
            kind = InodeKind.FREE
        return cls(
            kind, perm, nlink, size, uid, gid,
            a_s * 1_000_000_000 + a_n, m_s * 1_000_000_000 + m_n, c_s * 1_000_000_000 + c_n,
            direct, indirect, dindirect, blocks, generation,
        )

    def copy(self) -> "DiskInode":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values["direct"] = list(self.direct)
        return DiskInode(**values)

    def pointers(self) -> list[int]:
        return [*self.direct, self.indirect, self.dindirect]

    def to_attr(self, ino: int, block_size: int) -> FileAttr:
        return FileAttr(
            ino=ino,
            size=self.size,
            blocks=self.blocks * (block_size // 512),
            kind=self.kind.file_kind,
            perm=self.perm & 0o7777,
            nlink=self.nlink,
            uid=self.uid,
            gid=self.gid,
            atime_ns=self.atime_ns,
            mtime_ns=self.mtime_ns,
            ctime_ns=self.ctime_ns,
        )


assert _INODE.size == INODE_SIZE


# ---------------------------------------------------------------------------
# Bitmaps
# ---------------------------------------------------------------------------


def bit_location(index: int, start: int, block_size: int) -> tuple[int, int, int]:
    """(block number, byte offset, bit mask) for bit `index` of a bitmap region."""
    bits = block_size * 8
    blockno = start + index // bits
    within = index % bits
    return blockno, within // 8, 1 << (within % 8)


def bit_is_set(block: bytes, byte: int, mask: int) -> bool:
    return bool(block[byte] & mask)


# ---------------------------------------------------------------------------
# Geometry and mkfs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Geometry:
    total_blocks: int
    inode_count: int
    journal_len: int = settings.JOURNAL_LEN
    block_size: int = settings.BLOCK_SIZE

    @classmethod
    def for_device(
        cls,
        total_blocks: int,
        block_size: int = settings.BLOCK_SIZE,
        journal_len: Optional[int] = None,
        inode_count: Optional[int] = None,
    ) -> "Geometry":
        if journal_len is None:
            journal_len = min(settings.JOURNAL_LEN, max(MIN_FS_JOURNAL_LEN, total_blocks // 4))
        if inode_count is None:
            inode_count = max(16, total_blocks // settings.BLOCKS_PER_INODE)
        return cls(total_blocks, inode_count, journal_len, block_size)

    def superblock(self) -> Superblock:
        bsize = self.block_size
        bits = bsize * 8
        max_ino = self.inode_count + 1
        journal_start = SUPERBLOCK_BLOCKNO + 1
        ibm_start = journal_start + self.journal_len
        ibm_len = math.ceil((max_ino + 1) / bits)
        bbm_start = ibm_start + ibm_len
        bbm_len = math.ceil(self.total_blocks / bits)
        itable_start = bbm_start + bbm_len
        itable_len = math.ceil((max_ino + 1) / (bsize // INODE_SIZE))
        return Superblock(
            block_size=bsize,
            total_blocks=self.total_blocks,
            inode_count=self.inode_count,
            journal_start=journal_start,
            journal_len=self.journal_len,
            inode_bitmap_start=ibm_start,
            inode_bitmap_len=ibm_len,
            block_bitmap_start=bbm_start,
            block_bitmap_len=bbm_len,
            inode_table_start=itable_start,
            inode_table_len=itable_len,
            data_start=itable_start + itable_len,
        )


class _FormatStore:
    """Directory store used while formatting: allocates data blocks in order."""

    def __init__(self, dev: BlockDevice, first_free: int):
        self.dev = dev
        self.next_free = first_free
        self.mapped: list[int] = []
        self.contents: dict[int, bytes] = {}

    def read_block(self, lblk: int) -> bytes:
        return self.contents.get(lblk, bytes(self.dev.block_size))

    def write_block(self, lblk: int, data: bytes) -> None:
        self.contents[lblk] = data

    def append_block(self) -> int:
        self.mapped.append(self.next_free)
        self.next_free += 1
        return len(self.mapped) - 1


def mkfs(dev: BlockDevice, geometry: Optional[Geometry] = None, clock: Optional[Clock] = None) -> Superblock:
    """
    Format a device with an empty Bento-fs.

    Writes the superblock, an empty journal, zeroed bitmaps and inode table,
    the root directory (ino 1 holding "." and "..") and the empty provenance
    log (ino 2). Timestamps are 0 unless a clock is given, so formats are
    deterministic.

    Args:
        dev: Target device
        geometry: Layout; derived from the device size when omitted
        clock: Nanosecond timestamp source for the root and log inodes

    Returns:
        The written superblock

    Raises:
        DeviceTooSmall: If the geometry does not fit the device
    """
    if geometry is None:
        geometry = Geometry.for_device(dev.block_count, dev.block_size)
    if geometry.block_size != dev.block_size:
        raise LayoutError(f"geometry block size {geometry.block_size} != device {dev.block_size}")
    if geometry.journal_len < MIN_FS_JOURNAL_LEN:
        raise DeviceTooSmall(f"journal of {geometry.journal_len} blocks is below {MIN_FS_JOURNAL_LEN}")
    if geometry.total_blocks > dev.block_count:
        raise DeviceTooSmall(f"geometry needs {geometry.total_blocks} blocks, device has {dev.block_count}")
    sb = geometry.superblock()
    if sb.data_start + 2 > sb.total_blocks:
        raise DeviceTooSmall(
            f"{sb.total_blocks} blocks cannot hold metadata ending at {sb.data_start} plus a root directory"
        )

    bsize = sb.block_size
    zero = bytes(bsize)
    now = clock() if clock is not None else 0

    dev.write_block(0, zero)
    Journal(dev, sb.journal_start, sb.journal_len).format()
    for blockno in range(sb.inode_bitmap_start, sb.data_start):
        dev.write_block(blockno, zero)

    store = _FormatStore(dev, sb.data_start)
    DirTree(store, bsize).format(ROOT_INO, ROOT_INO)
    for lblk, blockno in enumerate(store.mapped):
        dev.write_block(blockno, store.contents[lblk])

    root = DiskInode(
        kind=InodeKind.DIRECTORY, perm=0o755, nlink=2, size=len(store.mapped) * bsize,
        atime_ns=now, mtime_ns=now, ctime_ns=now, blocks=len(store.mapped),
    )
    root.direct[:len(store.mapped)] = store.mapped
    log = DiskInode(kind=InodeKind.REGULAR, perm=0o600, nlink=1, atime_ns=now, mtime_ns=now, ctime_ns=now)

    tables: dict[int, bytearray] = {}

    def table(blockno: int) -> bytearray:
        return tables.setdefault(blockno, bytearray(bsize))

    for ino, inode in ((ROOT_INO, root), (PROV_INO, log)):
        blockno, offset = sb.inode_location(ino)
        table(blockno)[offset:offset + INODE_SIZE] = inode.pack()
    for ino in (0, ROOT_INO, PROV_INO):
        blockno, byte, mask = bit_location(ino, sb.inode_bitmap_start, bsize)
        table(blockno)[byte] |= mask
    for used in range(store.next_free):
        blockno, byte, mask = bit_location(used, sb.block_bitmap_start, bsize)
        table(blockno)[byte] |= mask
    for blockno, data in sorted(tables.items()):
        dev.write_block(blockno, bytes(data))

    dev.write_block(SUPERBLOCK_BLOCKNO, sb.pack())
    dev.flush()
    logger.info(
        "formatted %s: %d blocks, %d inodes, journal %d blocks, data from block %d",
        dev.name or "device", sb.total_blocks, sb.inode_count, sb.journal_len, sb.data_start,
    )
    return sb


def read_superblock(dev: BlockDevice) -> Superblock:
    """
    Raises:
        BadMagic: If block 1 does not hold a Bento-fs superblock
    """
    if dev.block_count <= SUPERBLOCK_BLOCKNO:
        raise BadMagic("device too small to hold a superblock")
    sb = Superblock.unpack(dev.read_block(SUPERBLOCK_BLOCKNO))
    if sb.block_size != dev.block_size or sb.total_blocks > dev.block_count:
        raise BadMagic(f"superblock geometry does not match {dev!r}")
    return sb
