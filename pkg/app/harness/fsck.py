"""
Offline consistency checker for Bento-fs images.

Runs on an unmounted image and never writes to it. Checks, in order: the
superblock, the journal (no committed records left to replay), the block
mappings of every reachable inode, both bitmaps against reachability from
the root, link counts, hash placement inside every directory, and sizes
against mapped blocks.
"""

import errno
import logging
import struct
from collections import Counter, deque
from pathlib import Path
from typing import Optional, Union

from app.core.config import settings
from app.core.errors import FsError
from app.filesystems.dirtree import DirTree, decode_name
from app.filesystems.layout import (
    NDIRECT,
    PROV_INO,
    ROOT_INO,
    SUPERBLOCK_BLOCKNO,
    DiskInode,
    InodeKind,
    LayoutError,
    Superblock,
    read_superblock,
)
from app.models.schemas import FsckReport, FsckViolation
from app.services.blockdev import BlockDevice, open_device
from app.services.journal import Journal, JournalError

logger = logging.getLogger(__name__)


class _ReadOnlyStore:
    """DirStore over a logical-to-physical map read straight from the image."""

    def __init__(self, checker: "_Checker", mapping: dict[int, int]):
        self.checker = checker
        self.mapping = mapping

    def read_block(self, lblk: int) -> bytes:
        blockno = self.mapping.get(lblk)
        if not blockno:
            return bytes(self.checker.sb.block_size)
        return self.checker.block(blockno)

    def write_block(self, lblk: int, data: bytes) -> None:
        raise FsError(errno.EROFS, "fsck never writes")

    def append_block(self) -> int:
        raise FsError(errno.EROFS, "fsck never writes")


def _bit(bitmap: bytes, index: int) -> bool:
    return bool(bitmap[index // 8] & (1 << (index % 8)))


class _Checker:
    def __init__(self, dev: BlockDevice, sb: Superblock, report: FsckReport):
        self.dev = dev
        self.sb = sb
        self.report = report
        self._blocks: dict[int, bytes] = {}
        self.owners: dict[int, int] = {}
        self.claimed: Counter = Counter()
        self.mappings: dict[int, dict[int, int]] = {}
        self.refs: Counter = Counter()
        self.reachable: set[int] = set()

    def violation(self, check: str, message: str, ino: Optional[int] = None, block: Optional[int] = None) -> None:
        logger.debug("fsck %s: %s", check, message)
        self.report.violations.append(FsckViolation(check=check, message=message, ino=ino, block=block))

    def block(self, blockno: int) -> bytes:
        data = self._blocks.get(blockno)
        if data is None:
            data = self.dev.read_block(blockno)
            self._blocks[blockno] = data
        return data

    def _region(self, start: int, length: int) -> bytes:
        return b"".join(self.block(b) for b in range(start, start + length))

    def _ptrs(self, blockno: int) -> tuple[int, ...]:
        return struct.unpack_from(f"<{self.sb.pointers_per_block}I", self.block(blockno))

    # ------------------------------------------------------------------

    def run(self) -> None:
        sb = self.sb
        self._check_journal()
        self.inode_bitmap = self._region(sb.inode_bitmap_start, sb.inode_bitmap_len)
        self.block_bitmap = self._region(sb.block_bitmap_start, sb.block_bitmap_len)
        table = self._region(sb.inode_table_start, sb.inode_table_len)
        self.inodes = {}
        for ino in range(sb.max_ino + 1):
            blockno, offset = sb.inode_location(ino)
            self.inodes[ino] = DiskInode.unpack(table, (blockno - sb.inode_table_start) * sb.block_size + offset)
        self._walk_namespace()
        self._check_inodes()
        self._check_block_bitmap()
        self.report.blocks_checked = sb.total_blocks

    def _check_journal(self) -> None:
        sb = self.sb
        try:
            records, _ = Journal(self.dev, sb.journal_start, sb.journal_len, commit_interval_ms=None).scan()
        except JournalError as e:
            self.violation("journal", str(e), block=sb.journal_start)
            return
        if records:
            self.violation(
                "journal",
                f"{len(records)} committed records (from sequence {records[0][0]}) not yet written home; "
                "mount the image to recover it",
                block=sb.journal_start,
            )

    # ------------------------------------------------------------------
    # Mappings
    # ------------------------------------------------------------------

    def _claim(self, ino: int, blockno: int, what: str) -> bool:
        if not self.sb.data_start <= blockno < self.sb.total_blocks:
            self.violation("blocks", f"{what} of inode {ino} points at block {blockno} outside the data region",
                           ino=ino, block=blockno)
            return False
        owner = self.owners.get(blockno)
        if owner is not None:
            self.violation("blocks", f"block {blockno} is mapped by inode {owner} and again by inode {ino}",
                           ino=ino, block=blockno)
            return False
        self.owners[blockno] = ino
        self.claimed[ino] += 1
        return True

    def _map(self, ino: int) -> dict[int, int]:
        """Claim every block the inode maps; returns its logical -> physical data map."""
        if ino in self.mappings:
            return self.mappings[ino]
        d = self.inodes[ino]
        per = self.sb.pointers_per_block
        mapping: dict[int, int] = {}
        for i, blockno in enumerate(d.direct):
            if blockno and self._claim(ino, blockno, f"direct[{i}]"):
                mapping[i] = blockno
        if d.indirect and self._claim(ino, d.indirect, "indirect block"):
            for i, blockno in enumerate(self._ptrs(d.indirect)):
                if blockno and self._claim(ino, blockno, f"indirect[{i}]"):
                    mapping[NDIRECT + i] = blockno
        if d.dindirect and self._claim(ino, d.dindirect, "double-indirect block"):
            for outer, mid in enumerate(self._ptrs(d.dindirect)):
                if not mid or not self._claim(ino, mid, f"double-indirect[{outer}]"):
                    continue
                for i, blockno in enumerate(self._ptrs(mid)):
                    if blockno and self._claim(ino, blockno, f"double-indirect[{outer}][{i}]"):
                        mapping[NDIRECT + per + outer * per + i] = blockno
        self.mappings[ino] = mapping
        return mapping

    # ------------------------------------------------------------------
    # Namespace
    # ------------------------------------------------------------------

    def _walk_namespace(self) -> None:
        root = self.inodes[ROOT_INO]
        if root.kind != InodeKind.DIRECTORY:
            self.violation("dirtree", "root inode is not a directory", ino=ROOT_INO)
            return
        self.reachable = {ROOT_INO, PROV_INO}
        self._map(PROV_INO)
        queue = deque([(ROOT_INO, ROOT_INO)])
        while queue:
            ino, parent = queue.popleft()
            tree = DirTree(_ReadOnlyStore(self, self._map(ino)), self.sb.block_size)
            for problem in tree.check():
                self.violation("dirtree", f"directory {ino}: {problem}", ino=ino)
            try:
                entries = list(tree.entries())
            except FsError as e:
                self.violation("dirtree", f"directory {ino} cannot be listed: {e}", ino=ino)
                continue
            for _, raw, child in entries:
                name = decode_name(raw)
                self.refs[child] += 1
                if raw in (b".", b".."):
                    expected = ino if raw == b"." else parent
                    if child != expected:
                        self.violation("dirtree", f"directory {ino}: {name!r} names {child}, expected {expected}",
                                       ino=ino)
                    continue
                if not ROOT_INO <= child <= self.sb.max_ino or child == PROV_INO:
                    self.violation("dirtree", f"directory {ino}: {name!r} names invalid inode {child}", ino=ino)
                    continue
                if self.inodes[child].kind == InodeKind.FREE:
                    self.violation("dirtree", f"directory {ino}: {name!r} names free inode {child}", ino=ino)
                    continue
                if child in self.reachable:
                    if self.inodes[child].kind == InodeKind.DIRECTORY:
                        self.violation("nlink", f"directory {child} is linked from more than one place", ino=child)
                    continue
                self.reachable.add(child)
                if self.inodes[child].kind == InodeKind.DIRECTORY:
                    queue.append((child, ino))
                else:
                    self._map(child)

    # ------------------------------------------------------------------
    # Inodes and bitmaps
    # ------------------------------------------------------------------

    def _check_inodes(self) -> None:
        sb = self.sb
        for ino in range(ROOT_INO, sb.max_ino + 1):
            d = self.inodes[ino]
            allocated = _bit(self.inode_bitmap, ino)
            if ino in self.reachable:
                if not allocated:
                    self.violation("bitmaps", f"inode {ino} is reachable but free in the inode bitmap", ino=ino)
                expected = self.refs[ino] + (1 if ino == PROV_INO else 0)
                if d.nlink != expected:
                    self.violation("nlink", f"inode {ino} has nlink {d.nlink}, {expected} entries reference it",
                                   ino=ino)
                self._check_sizes(ino, d)
                self.report.inodes_checked += 1
            elif allocated:
                if d.kind != InodeKind.FREE and d.nlink == 0:
                    self._map(ino)
                    self._check_sizes(ino, d)
                    self.report.orphans += 1
                    self.report.inodes_checked += 1
                else:
                    self.violation("bitmaps", f"inode {ino} is allocated but unreachable from the root", ino=ino)
            elif d.kind != InodeKind.FREE or d.nlink or any(d.pointers()):
                self.violation("bitmaps", f"inode {ino} is free in the bitmap but holds a {d.kind.name.lower()}",
                               ino=ino)

    def _check_sizes(self, ino: int, d: DiskInode) -> None:
        bsize = self.sb.block_size
        mapping = self.mappings.get(ino, {})
        if d.blocks != self.claimed[ino]:
            self.violation("sizes", f"inode {ino} records {d.blocks} blocks but maps {self.claimed[ino]}", ino=ino)
        if d.size > self.sb.max_file_size:
            self.violation("sizes", f"inode {ino} size {d.size} exceeds the file size cap", ino=ino)
        limit = -(-d.size // bsize)
        beyond = sorted(lblk for lblk in mapping if lblk >= limit)
        if beyond:
            self.violation("sizes", f"inode {ino} of size {d.size} maps logical block {beyond[0]} past its end",
                           ino=ino, block=mapping[beyond[0]])
        if d.kind == InodeKind.DIRECTORY:
            if d.size % bsize:
                self.violation("sizes", f"directory {ino} size {d.size} is not a whole number of blocks", ino=ino)
            holes = [lblk for lblk in range(limit) if lblk not in mapping]
            if holes:
                self.violation("sizes", f"directory {ino} has a hole at logical block {holes[0]}", ino=ino)
        elif d.kind == InodeKind.SYMLINK and (d.size == 0 or 0 not in mapping):
            self.violation("sizes", f"symlink {ino} has no target block", ino=ino)

    def _check_block_bitmap(self) -> None:
        sb = self.sb
        for blockno in range(sb.total_blocks):
            used = blockno < sb.data_start or blockno in self.owners
            marked = _bit(self.block_bitmap, blockno)
            if used and not marked:
                owner = self.owners.get(blockno)
                what = f"mapped by inode {owner}" if owner is not None else "metadata"
                self.violation("bitmaps", f"block {blockno} is {what} but free in the block bitmap",
                               ino=owner, block=blockno)
            elif marked and not used:
                self.violation("bitmaps", f"block {blockno} is allocated but referenced by nothing", block=blockno)


def fsck(dev: BlockDevice) -> FsckReport:
    """
    Check an unmounted device.

    Args:
        dev: Device holding the image; only read

    Returns:
        FsckReport; report.clean is True when no invariant is broken
    """
    report = FsckReport()
    try:
        sb = read_superblock(dev)
    except LayoutError as e:
        report.violations.append(FsckViolation(check="superblock", message=str(e), block=SUPERBLOCK_BLOCKNO))
        return report
    problems = sb.validate()
    if problems:
        for problem in problems:
            report.violations.append(FsckViolation(check="superblock", message=problem, block=SUPERBLOCK_BLOCKNO))
        return report
    _Checker(dev, sb, report).run()
    level = logging.INFO if report.clean else logging.WARNING
    logger.log(
        level, "fsck %s: %d inodes, %d blocks, %d orphans, %d violations",
        dev.name or "device", report.inodes_checked, report.blocks_checked, report.orphans, len(report.violations),
    )
    return report


def fsck_image(path: Union[str, Path], block_size: int = settings.BLOCK_SIZE) -> FsckReport:
    """Open an image file, check it and close it again."""
    dev = open_device(path, block_size)
    try:
        return fsck(dev)
    finally:
        dev.close()


def format_violation(v: FsckViolation) -> str:
    """Machine-readable line: CHECK ino=N block=N message."""
    ino = "-" if v.ino is None else v.ino
    block = "-" if v.block is None else v.block
    return f"{v.check} ino={ino} block={block} {v.message}"
