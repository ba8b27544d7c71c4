"""
Bento-fs: an xv6-style journaling file system behind the File Operations API.

Every mutating handler runs inside one journal handle that covers every
block it touches, so each API call is crash-atomic. Handlers take their
journal handle before any inode lock and end it after releasing them.
"""

import errno
import logging
import os
import re
import stat
import struct
import threading
import time
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass
from typing import ContextManager, Iterator, Optional

from app.core.config import settings
from app.core.errors import FsError
from app.filesystems.dirtree import NAME_MAX, DirTree, decode_name, encode_name
from app.filesystems.layout import (
    NDIRECT,
    PROV_INO,
    ROOT_INO,
    BadMagic,
    Clock,
    DiskInode,
    InodeKind,
    Superblock,
    bit_location,
    read_superblock,
)
from app.models.schemas import (
    AccessArgs,
    AttrReply,
    CreateArgs,
    CreatedReply,
    DataReply,
    DestroyArgs,
    DirEntriesReply,
    DirEntry,
    EntryReply,
    FlushArgs,
    ForgetArgs,
    FsyncArgs,
    FsyncdirArgs,
    GetattrArgs,
    InitArgs,
    LinkArgs,
    LookupArgs,
    MkdirArgs,
    MknodArgs,
    MountOptions,
    OkReply,
    OpenArgs,
    OpendirArgs,
    OpenReply,
    ReadArgs,
    ReaddirArgs,
    ReadlinkArgs,
    ReleaseArgs,
    ReleasedirArgs,
    RenameArgs,
    RequestContext,
    RmdirArgs,
    SetattrArgs,
    StatfsArgs,
    StatfsReply,
    SymlinkArgs,
    UnlinkArgs,
    WriteArgs,
    WrittenReply,
)
from app.services.blockdev import BlockDevice, open_device
from app.services.journal import Journal, TransactionHandle, journal_init
from app.services.live_upgrade import ProvenanceState, TransferCapsule, TransferRefused, VersionMismatch

logger = logging.getLogger(__name__)

RENAME_NOREPLACE = 1
RENAME_EXCHANGE = 2

_PTR = struct.Struct("<I")
_NOT_FULL = re.compile(rb"[^\xff]")


# ---------------------------------------------------------------------------
# In-memory state
# ---------------------------------------------------------------------------


class CachedInode:
    """In-memory copy of one disk inode plus its lock and open count."""

    def __init__(self, ino: int, disk: DiskInode):
        self.ino = ino
        self.disk = disk
        self.lock = threading.RLock()
        self.open_count = 0

    @property
    def kind(self) -> InodeKind:
        return self.disk.kind

    @property
    def is_dir(self) -> bool:
        return self.disk.kind == InodeKind.DIRECTORY


class InodeCache:
    """At most one CachedInode per inode number."""

    def __init__(self, loader):
        self._loader = loader
        self._lock = threading.Lock()
        self._entries: dict[int, CachedInode] = {}

    def get(self, ino: int) -> CachedInode:
        with self._lock:
            inode = self._entries.get(ino)
            if inode is None:
                inode = CachedInode(ino, self._loader(ino))
                self._entries[ino] = inode
            return inode

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


@dataclass
class OpenFile:
    ino: int
    flags: int
    pid: int
    is_dir: bool = False

    @property
    def readable(self) -> bool:
        return (self.flags & os.O_ACCMODE) in (os.O_RDONLY, os.O_RDWR)

    @property
    def writable(self) -> bool:
        return (self.flags & os.O_ACCMODE) in (os.O_WRONLY, os.O_RDWR)


def _scan_clear(bitmap: bytearray, start: int, end: int) -> Optional[int]:
    """First clear bit in [start, end)."""
    pos = start
    while pos < end:
        if pos % 8 == 0:
            match = _NOT_FULL.search(bitmap, pos // 8, (end + 7) // 8)
            if match is None:
                return None
            pos = max(pos, match.start() * 8)
            if pos >= end:
                return None
        if not bitmap[pos // 8] & (1 << (pos % 8)):
            return pos
        pos += 1
    return None


@dataclass
class BlockGrant:
    remaining: int


class Allocator:
    """
    Inode and block bitmaps with next-fit cursors.

    An in-memory mirror answers searches; every bit change is also made in
    the on-disk bitmap block and captured in the caller's handle.
    """

    def __init__(self, dev: BlockDevice, sb: Superblock):
        self.dev = dev
        self.sb = sb
        self.lock = threading.Lock()
        self.inode_cursor = ROOT_INO + 1
        self.block_cursor = sb.data_start
        self._imap = bytearray()
        self._bmap = bytearray()
        self.free_inodes = 0
        self.free_blocks = 0
        self.reserved = 0

    def load(self) -> None:
        sb = self.sb
        imap, bmap = bytearray(), bytearray()
        for i in range(sb.inode_bitmap_len):
            with self.dev.bread(sb.inode_bitmap_start + i) as bh:
                imap += bh.data
        for i in range(sb.block_bitmap_len):
            with self.dev.bread(sb.block_bitmap_start + i) as bh:
                bmap += bh.data
        self._imap, self._bmap = imap, bmap
        self.free_inodes = sum(
            1 for ino in range(ROOT_INO, sb.max_ino + 1) if ino != PROV_INO and not self.inode_allocated(ino)
        )
        self.free_blocks = sum(1 for b in range(sb.data_start, sb.total_blocks) if not self.block_allocated(b))

    def inode_allocated(self, ino: int) -> bool:
        return bool(self._imap[ino // 8] & (1 << (ino % 8)))

    def block_allocated(self, blockno: int) -> bool:
        return bool(self._bmap[blockno // 8] & (1 << (blockno % 8)))

    def _flip(self, h: TransactionHandle, mirror: bytearray, start: int, index: int, value: bool) -> None:
        blockno, byte, mask = bit_location(index, start, self.sb.block_size)
        pos = index // 8
        if value:
            mirror[pos] |= mask
        else:
            mirror[pos] &= ~mask & 0xFF
        with self.dev.getblk(blockno) as bh:
            buf = bh.data
            buf[byte] = (buf[byte] | mask) if value else (buf[byte] & ~mask & 0xFF)
            h.write(bh)

    def alloc_inode(self, h: TransactionHandle) -> int:
        with self.lock:
            lo, hi = ROOT_INO + 1, self.sb.max_ino + 1
            found = _scan_clear(self._imap, self.inode_cursor, hi)
            if found is None:
                found = _scan_clear(self._imap, lo, self.inode_cursor)
            if found is None:
                raise FsError(errno.ENOSPC, "no free inodes")
            self._flip(h, self._imap, self.sb.inode_bitmap_start, found, True)
            self.inode_cursor = found + 1 if found + 1 < hi else lo
            self.free_inodes -= 1
            return found

    def free_inode(self, h: TransactionHandle, ino: int) -> None:
        with self.lock:
            if not self.inode_allocated(ino):
                logger.warning("double free of inode %d", ino)
                return
            self._flip(h, self._imap, self.sb.inode_bitmap_start, ino, False)
            self.free_inodes += 1

    @contextmanager
    def reservation(self, count: int) -> Iterator[BlockGrant]:
        """
        Set `count` blocks aside for allocations made through the yielded
        grant; whatever the grant did not use goes back on exit.

        Raises:
            FsError: ENOSPC if fewer than `count` unreserved blocks are free
        """
        with self.lock:
            if self.free_blocks - self.reserved < count:
                raise FsError(errno.ENOSPC, f"cannot reserve {count} blocks")
            self.reserved += count
        grant = BlockGrant(count)
        try:
            yield grant
        finally:
            with self.lock:
                self.reserved -= grant.remaining
                grant.remaining = 0

    def alloc_block(self, h: TransactionHandle, grant: Optional[BlockGrant] = None) -> int:
        with self.lock:
            if grant is not None and grant.remaining > 0:
                grant.remaining -= 1
                self.reserved -= 1
            elif self.free_blocks - self.reserved < 1:
                raise FsError(errno.ENOSPC, "no unreserved free blocks")
            lo, hi = self.sb.data_start, self.sb.total_blocks
            found = _scan_clear(self._bmap, self.block_cursor, hi)
            if found is None:
                found = _scan_clear(self._bmap, lo, self.block_cursor)
            if found is None:
                raise FsError(errno.ENOSPC, "no free blocks")
            self._flip(h, self._bmap, self.sb.block_bitmap_start, found, True)
            self.block_cursor = found + 1 if found + 1 < hi else lo
            self.free_blocks -= 1
            return found

    def release_blocks(self, h: TransactionHandle, blocknos: list[int]) -> None:
        with self.lock:
            for blockno in sorted(blocknos):
                if not self.sb.data_start <= blockno < self.sb.total_blocks or not self.block_allocated(blockno):
                    logger.warning("free of unallocated block %d", blockno)
                    continue
                self._flip(h, self._bmap, self.sb.block_bitmap_start, blockno, False)
                self.free_blocks += 1


class _DirStore:
    """DirTree storage over a directory inode's mapped blocks."""

    def __init__(
        self, fs: "BentoFs", inode: CachedInode, h: Optional[TransactionHandle] = None,
        grant: Optional[BlockGrant] = None,
    ):
        self.fs = fs
        self.inode = inode
        self.h = h
        self.grant = grant

    def read_block(self, lblk: int) -> bytes:
        blockno = self.fs._bmap(None, self.inode, lblk)
        if not blockno:
            return bytes(self.fs.sb.block_size)
        with self.fs.dev.bread(blockno) as bh:
            return bh.data

    def write_block(self, lblk: int, data: bytes) -> None:
        if self.h is None:
            raise FsError(errno.EROFS, "directory opened read-only")
        blockno = self.fs._bmap(self.h, self.inode, lblk, self.grant)
        with self.fs.dev.getblk(blockno) as bh:
            bh.fill(data)
            self.h.write(bh)

    def append_block(self) -> int:
        if self.h is None:
            raise FsError(errno.EROFS, "directory opened read-only")
        bsize = self.fs.sb.block_size
        lblk = self.inode.disk.size // bsize
        self.fs._bmap(self.h, self.inode, lblk, self.grant)
        self.inode.disk.size = (lblk + 1) * bsize
        self.fs._iupdate(self.h, self.inode)
        return lblk


# ---------------------------------------------------------------------------
# File system
# ---------------------------------------------------------------------------


class BentoFs:
    """
    Bento-fs instance. Handlers are named bento_<opcode>, take the request
    context and the opcode's argument model, and raise FsError.
    """

    variant = "bentofs"
    capsule_version = 0
    accepts_capsule_version = 0

    # Journal credits per operation, before bitmap terms.
    DIR_INSERT_CREDITS = 9
    CREATE_CREDITS = 14
    MKDIR_CREDITS = 18
    REMOVE_CREDITS = 8
    RENAME_CREDITS = 24
    TRUNCATE_CREDITS = 6
    WRITE_OVERHEAD_CREDITS = 6
    # One leaf split: the new leaf plus the pointer blocks that can map it.
    DIR_GROW_BLOCKS = 3

    def __init__(self, device: Optional[BlockDevice] = None, clock: Optional[Clock] = None):
        self._preset_device = device
        self.clock: Clock = clock or time.time_ns
        self.dev: Optional[BlockDevice] = None
        self.sb: Optional[Superblock] = None
        self.journal: Optional[Journal] = None
        self.alloc: Optional[Allocator] = None
        self.options = MountOptions()
        self.inodes: Optional[InodeCache] = None
        self._owns_device = False
        self._handles: dict[int, OpenFile] = {}
        self._handle_lock = threading.Lock()
        self._next_fh = 1
        self._lookups: dict[int, int] = {}
        self._lookup_lock = threading.Lock()
        self._orphans: set[int] = set()
        self._rename_lock = threading.Lock()
        self._chunk_blocks = settings.WRITE_CHUNK_BLOCKS

    # ------------------------------------------------------------------
    # Mount state
    # ------------------------------------------------------------------

    @property
    def mounted(self) -> bool:
        return self.journal is not None

    def _require_mounted(self) -> None:
        if self.journal is None:
            raise FsError(errno.ESHUTDOWN, f"{self.variant} instance is not mounted")

    def _attach(self, dev: BlockDevice, sb: Superblock, journal: Journal) -> None:
        self.dev = dev
        self.sb = sb
        self.journal = journal
        self.alloc = Allocator(dev, sb)
        self.inodes = InodeCache(self._load_inode)
        limit = min(journal.area - 2, journal.max_targets)
        overhead = self.WRITE_OVERHEAD_CREDITS + min(sb.block_bitmap_len, 2 * settings.WRITE_CHUNK_BLOCKS)
        self._chunk_blocks = max(1, min(settings.WRITE_CHUNK_BLOCKS, limit - overhead))

    def bento_init(self, ctx: RequestContext, args: InitArgs) -> OkReply:
        """
        Open the device, recover the journal, load the superblock and free
        inodes orphaned by a crash.

        Raises:
            BadMagic: If the device does not hold a Bento-fs image
        """
        options = args.fc_info
        if self._preset_device is not None:
            dev = self._preset_device
            self._owns_device = False
        else:
            dev = open_device(args.devname, options.block_size, options.cache_capacity)
            self._owns_device = True
        if options.record_trace:
            dev.trace.start()
        try:
            sb = read_superblock(dev)
            problems = sb.validate()
            if problems:
                raise BadMagic("; ".join(problems))
            journal = journal_init(
                dev, sb.journal_start, sb.journal_len,
                commit_interval_ms=options.commit_interval_ms,
                enabled=options.journal_enabled,
            )
        except BaseException:
            if self._owns_device:
                dev.close()
            raise
        self.options = options
        self._attach(dev, sb, journal)
        self.alloc.load()
        self._mount_hook()
        self._cleanup_orphans()
        logger.info(
            "mounted %s on %s (%d blocks, %d free, journal seq %d)",
            self.variant, dev.name or args.devname, sb.total_blocks, self.alloc.free_blocks, journal.sequence,
        )
        return OkReply()

    def _mount_hook(self) -> None:
        """Variant-specific mount work, run after the allocator is loaded."""

    def _cleanup_orphans(self) -> None:
        sb = self.sb
        orphans = []
        for ino in range(ROOT_INO + 1, sb.max_ino + 1):
            if ino == PROV_INO or not self.alloc.inode_allocated(ino):
                continue
            inode = self.inodes.get(ino)
            if inode.disk.nlink == 0:
                orphans.append(inode)
        for inode in orphans:
            with self._transaction(self._free_credits()) as h:
                with inode.lock:
                    self._free_inode(h, inode)
        if orphans:
            logger.info("freed %d orphaned inodes", len(orphans))

    def bento_destroy(self, ctx: RequestContext, args: DestroyArgs) -> OkReply:
        """Commit and checkpoint everything, write back the cache, release the device."""
        if self.journal is None:
            return OkReply()
        self.journal.close()
        self.dev.sync_all()
        if self._owns_device:
            self.dev.close()
        logger.info("unmounted %s (journal seq %d)", self.variant, self.journal.sequence - 1)
        self.journal = None
        return OkReply()

    # ------------------------------------------------------------------
    # Live upgrade
    # ------------------------------------------------------------------

    def bento_update_prepare(self) -> TransferCapsule:
        """Hand over every resource and leave this instance inert."""
        self._require_mounted()
        with self._handle_lock:
            handles = dict(self._handles)
            next_fh = self._next_fh
        with self._lookup_lock:
            lookups = dict(self._lookups)
        capsule = TransferCapsule(
            format_version=self.capsule_version,
            variant=self.variant,
            device=self.dev,
            owns_device=self._owns_device,
            journal=self.journal,
            superblock=self.sb,
            options=self.options,
            inode_cursor=self.alloc.inode_cursor,
            block_cursor=self.alloc.block_cursor,
            handles=handles,
            next_fh=next_fh,
            deferred_free=self._deferred_free_table(),
            lookups=lookups,
            provenance=self._provenance_state(),
        )
        self._detach()
        logger.info("%s prepared capsule v%d with %d open handles", self.variant, capsule.format_version, len(handles))
        return capsule

    def _detach(self) -> None:
        """Drop every reference to the device and journal without closing them."""
        self.dev = self.journal = self.alloc = self.inodes = self.sb = None
        with self._handle_lock:
            self._handles = {}
        with self._lookup_lock:
            self._lookups = {}
        self._orphans = set()

    def _deferred_free_table(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for ino in self._orphans:
            counts[ino] = self.inodes.get(ino).open_count
        return counts

    def _provenance_state(self) -> Optional[ProvenanceState]:
        return None

    def bento_update_transfer(self, ctx: RequestContext, capsule: Optional[TransferCapsule], devname: str = "") -> OkReply:
        """
        Adopt the state in a capsule; None mounts from scratch.

        Raises:
            VersionMismatch: If the capsule format is newer than this variant accepts
            TransferRefused: If this instance is mounted or the capsule was already adopted
        """
        if capsule is None:
            return self.bento_init(ctx, InitArgs(devname=devname, fc_info=self.options))
        self._check_capsule(capsule)
        self.options = capsule.options
        self._owns_device = capsule.owns_device
        try:
            self._attach(capsule.device, capsule.superblock, capsule.journal)
            self.alloc.load()
            self.alloc.inode_cursor = capsule.inode_cursor
            self.alloc.block_cursor = capsule.block_cursor
            self._handles = dict(capsule.handles)
            self._next_fh = capsule.next_fh
            with self._lookup_lock:
                self._lookups = dict(capsule.lookups)
            for open_file in self._handles.values():
                self.inodes.get(open_file.ino).open_count += 1
            self._orphans = set(capsule.deferred_free)
            self._adopt_provenance(capsule)
        except Exception:
            # the capsule stays unconsumed so its sender can take it back
            self._detach()
            raise
        capsule.release()
        logger.info("%s adopted capsule v%d", self.variant, capsule.format_version)
        return OkReply()

    def _check_capsule(self, capsule: TransferCapsule) -> None:
        """Reject a capsule before any of its state is adopted."""
        if capsule.format_version > self.accepts_capsule_version:
            raise VersionMismatch(
                f"{self.variant} accepts capsule format <= {self.accepts_capsule_version}, got {capsule.format_version}"
            )
        if self.mounted:
            raise TransferRefused(f"{self.variant} instance is already mounted")
        if capsule.consumed or capsule.journal is None or capsule.device is None:
            raise TransferRefused("capsule was already adopted")

    def _adopt_provenance(self, capsule: TransferCapsule) -> None:
        """Bento-fs keeps no provenance state."""

    # ------------------------------------------------------------------
    # Journal and inode plumbing
    # ------------------------------------------------------------------

    @contextmanager
    def _transaction(self, credits: int, *events: str) -> Iterator[TransactionHandle]:
        """One journal handle for an operation plus whatever its variant hooks log."""
        h = self.journal.begin_op(credits + self._hook_credits(*events))
        try:
            with self._hooks_reserved(*events):
                yield h
        finally:
            self.journal.end_op(h)

    def _free_credits(self) -> int:
        return self.TRUNCATE_CREDITS + self.sb.block_bitmap_len + 1

    def _hook_credits(self, *events: str) -> int:
        """Extra credits a variant needs to log the given events."""
        return 0

    def _hooks_reserved(self, *events: str) -> ContextManager[object]:
        """Space a variant sets aside before the operation mutates anything."""
        return nullcontext()

    def _load_inode(self, ino: int) -> DiskInode:
        blockno, offset = self.sb.inode_location(ino)
        with self.dev.bread(blockno) as bh:
            return DiskInode.unpack(bh.data, offset)

    def _iget(self, ino: int) -> CachedInode:
        if not ROOT_INO <= ino <= self.sb.max_ino:
            raise FsError(errno.ENOENT, f"inode {ino} out of range")
        inode = self.inodes.get(ino)
        if inode.disk.kind == InodeKind.FREE:
            raise FsError(errno.ENOENT, f"inode {ino} is free")
        return inode

    def _iupdate(self, h: TransactionHandle, inode: CachedInode) -> None:
        blockno, offset = self.sb.inode_location(inode.ino)
        with self.dev.getblk(blockno) as bh:
            bh.write(offset, inode.disk.pack())
            h.write(bh)

    def _ialloc(self, h: TransactionHandle, ctx: RequestContext, kind: InodeKind, perm: int) -> CachedInode:
        ino = self.alloc.alloc_inode(h)
        inode = self.inodes.get(ino)
        now = self.clock()
        inode.disk = DiskInode(
            kind=kind, perm=perm & 0o7777, nlink=1, uid=ctx.uid, gid=ctx.gid,
            atime_ns=now, mtime_ns=now, ctime_ns=now, generation=inode.disk.generation + 1,
        )
        inode.open_count = 0
        self._iupdate(h, inode)
        return inode

    @contextmanager
    def _locked(self, *inodes: CachedInode) -> Iterator[None]:
        ordered = sorted({i.ino: i for i in inodes}.values(), key=lambda i: i.ino)
        for inode in ordered:
            inode.lock.acquire()
        try:
            yield
        finally:
            for inode in reversed(ordered):
                inode.lock.release()

    def _attr(self, inode: CachedInode):
        return inode.disk.to_attr(inode.ino, self.sb.block_size)

    def _entry(self, inode: CachedInode) -> EntryReply:
        with self._lookup_lock:
            self._lookups[inode.ino] = self._lookups.get(inode.ino, 0) + 1
        return EntryReply(ino=inode.ino, attr=self._attr(inode), generation=inode.disk.generation)

    def _touch(self, inode: CachedInode, mtime: bool = True) -> None:
        now = self.clock()
        inode.disk.ctime_ns = now
        if mtime:
            inode.disk.mtime_ns = now

    # ------------------------------------------------------------------
    # Block mapping
    # ------------------------------------------------------------------

    def _ptr_get(self, blockno: int, idx: int) -> int:
        with self.dev.bread(blockno) as bh:
            return _PTR.unpack_from(bh.data, idx * 4)[0]

    def _ptrs(self, blockno: int) -> tuple[int, ...]:
        with self.dev.bread(blockno) as bh:
            return struct.unpack_from(f"<{self.sb.pointers_per_block}I", bh.data)

    def _ptr_set(self, h: TransactionHandle, blockno: int, idx: int, value: int) -> None:
        with self.dev.getblk(blockno) as bh:
            _PTR.pack_into(bh.data, idx * 4, value)
            h.write(bh)

    def _alloc_zeroed(self, h: TransactionHandle, inode: CachedInode, grant: Optional[BlockGrant] = None) -> int:
        blockno = self.alloc.alloc_block(h, grant)
        with self.dev.getblk(blockno) as bh:
            bh.fill(b"")
            h.write(bh)
        inode.disk.blocks += 1
        return blockno

    def _bmap(
        self, h: Optional[TransactionHandle], inode: CachedInode, lblk: int, grant: Optional[BlockGrant] = None,
    ) -> int:
        """
        Physical block for a logical block; 0 for a hole when h is None.
        With a handle, missing blocks (and pointer blocks) are allocated
        zero-filled.
        """
        d = inode.disk
        per = self.sb.pointers_per_block
        if lblk < NDIRECT:
            if not d.direct[lblk] and h is not None:
                d.direct[lblk] = self._alloc_zeroed(h, inode, grant)
            return d.direct[lblk]
        lblk -= NDIRECT
        if lblk < per:
            if not d.indirect:
                if h is None:
                    return 0
                d.indirect = self._alloc_zeroed(h, inode, grant)
            return self._slot(h, inode, d.indirect, lblk, grant)
        lblk -= per
        if lblk >= per * per:
            raise FsError(errno.EFBIG, "logical block beyond double-indirect range")
        if not d.dindirect:
            if h is None:
                return 0
            d.dindirect = self._alloc_zeroed(h, inode, grant)
        mid = self._slot(h, inode, d.dindirect, lblk // per, grant)
        if not mid:
            return 0
        return self._slot(h, inode, mid, lblk % per, grant)

    def _slot(
        self, h: Optional[TransactionHandle], inode: CachedInode, table: int, idx: int,
        grant: Optional[BlockGrant] = None,
    ) -> int:
        blockno = self._ptr_get(table, idx)
        if blockno or h is None:
            return blockno
        blockno = self._alloc_zeroed(h, inode, grant)
        self._ptr_set(h, table, idx, blockno)
        return blockno

    def _truncate_blocks(self, h: TransactionHandle, inode: CachedInode, new_size: int) -> list[int]:
        """Unmap every block past new_size and zero the tail of the last kept block."""
        d = inode.disk
        bsize = self.sb.block_size
        per = self.sb.pointers_per_block
        keep = -(-new_size // bsize)
        freed: list[int] = []

        if new_size % bsize and new_size < d.size:
            tail = self._bmap(None, inode, new_size // bsize)
            if tail:
                with self.dev.getblk(tail) as bh:
                    cut = new_size % bsize
                    bh.write(cut, bytes(bsize - cut))
                    h.write(bh)

        for i in range(min(keep, NDIRECT), NDIRECT):
            if d.direct[i]:
                freed.append(d.direct[i])
                d.direct[i] = 0

        def shrink_table(table: int, start: int) -> bool:
            """Free entries from start on; True when the whole table went."""
            ptrs = self._ptrs(table)
            doomed = [p for p in ptrs[start:] if p]
            if start == 0:
                freed.extend(doomed)
                freed.append(table)
                return True
            if doomed:
                freed.extend(doomed)
                with self.dev.getblk(table) as bh:
                    bh.write(start * 4, bytes((per - start) * 4))
                    h.write(bh)
            return False

        if d.indirect:
            if shrink_table(d.indirect, max(0, keep - NDIRECT)):
                d.indirect = 0

        if d.dindirect:
            start = max(0, keep - NDIRECT - per)
            outer_ptrs = self._ptrs(d.dindirect)
            cleared = []
            for outer, mid in enumerate(outer_ptrs):
                if not mid:
                    continue
                mid_start = start - outer * per
                if mid_start >= per:
                    continue
                if shrink_table(mid, max(0, mid_start)):
                    cleared.append(outer)
            if start == 0:
                freed.append(d.dindirect)
                d.dindirect = 0
            elif cleared:
                with self.dev.getblk(d.dindirect) as bh:
                    for outer in cleared:
                        _PTR.pack_into(bh.data, outer * 4, 0)
                    h.write(bh)

        if freed:
            h.discard(freed)
            self.alloc.release_blocks(h, freed)
            d.blocks -= len(freed)
        d.size = new_size
        return freed

    def _free_inode(self, h: TransactionHandle, inode: CachedInode) -> None:
        """Release an unlinked inode's blocks without writing them, then the inode."""
        freed = self._truncate_blocks(h, inode, 0)
        generation = inode.disk.generation
        inode.disk = DiskInode(generation=generation)
        self._iupdate(h, inode)
        self.alloc.free_inode(h, inode.ino)
        self._orphans.discard(inode.ino)
        with self._lookup_lock:
            self._lookups.pop(inode.ino, None)
        logger.debug("freed inode %d and %d blocks", inode.ino, len(freed))

    def _maybe_free(self, h: TransactionHandle, inode: CachedInode) -> bool:
        """Free an inode with no links; defer while handles remain open."""
        if inode.disk.nlink > 0:
            return False
        if inode.open_count > 0:
            self._orphans.add(inode.ino)
            return False
        self._free_inode(h, inode)
        return True

    # ------------------------------------------------------------------
    # Directory helpers
    # ------------------------------------------------------------------

    def _dir(
        self, inode: CachedInode, h: Optional[TransactionHandle] = None, grant: Optional[BlockGrant] = None,
    ) -> DirTree:
        return DirTree(_DirStore(self, inode, h, grant), self.sb.block_size)

    def _require_dir(self, inode: CachedInode) -> None:
        if not inode.is_dir:
            raise FsError(errno.ENOTDIR, f"inode {inode.ino} is not a directory")

    def _lookup_ino(self, parent: CachedInode, raw: bytes) -> Optional[int]:
        with parent.lock:
            self._require_dir(parent)
            return self._dir(parent).lookup(raw)

    # ------------------------------------------------------------------
    # Variant hooks (run inside the operation's transaction)
    # ------------------------------------------------------------------

    def _after_create(self, h, ctx, parent: int, name: str, ino: int) -> None:
        pass

    def _after_symlink(self, h, ctx, parent: int, name: str, ino: int, target: str) -> None:
        pass

    def _after_unlink(self, h, ctx, parent: int, name: str, ino: int, deleted: bool) -> None:
        pass

    def _after_rename(self, h, ctx, parent: int, name: str, newparent: int, newname: str, ino: int, flags: int) -> None:
        pass

    def _after_open(self, h, ctx, ino: int, fh: int, flags: int) -> None:
        pass

    def _after_close(self, h, ctx, ino: int, fh: int, flags: int) -> None:
        pass

    # ------------------------------------------------------------------
    # Handles
    # ------------------------------------------------------------------

    def _new_handle(self, ino: int, flags: int, pid: int, is_dir: bool = False) -> int:
        with self._handle_lock:
            fh = self._next_fh
            self._next_fh += 1
            self._handles[fh] = OpenFile(ino, flags, pid, is_dir)
            return fh

    def _handle(self, ino: int, fh: int, is_dir: bool = False) -> OpenFile:
        with self._handle_lock:
            open_file = self._handles.get(fh)
        if open_file is None or open_file.ino != ino or open_file.is_dir != is_dir:
            raise FsError(errno.EBADF, f"fh {fh} is not open on inode {ino}")
        return open_file

    @property
    def open_handles(self) -> dict[int, OpenFile]:
        with self._handle_lock:
            return dict(self._handles)

    # ------------------------------------------------------------------
    # Namespace
    # ------------------------------------------------------------------

    def bento_lookup(self, ctx: RequestContext, args: LookupArgs) -> EntryReply:
        self._require_mounted()
        parent = self._iget(args.parent)
        raw = encode_name(args.name)
        ino = self._lookup_ino(parent, raw)
        if ino is None:
            raise FsError(errno.ENOENT, args.name)
        child = self._iget(ino)
        with child.lock:
            return self._entry(child)

    def bento_forget(self, ctx: RequestContext, args: ForgetArgs) -> OkReply:
        with self._lookup_lock:
            count = self._lookups.get(args.ino, 0) - args.nlookup
            if count > 0:
                self._lookups[args.ino] = count
            else:
                self._lookups.pop(args.ino, None)
        return OkReply()

    def _create_common(
        self, ctx: RequestContext, parent_ino: int, name: str, kind: InodeKind, perm: int,
        target: Optional[bytes] = None, flags: Optional[int] = None,
    ):
        """Create a regular file, directory or symlink; optionally open it."""
        self._require_mounted()
        raw = encode_name(name)
        base = {
            InodeKind.REGULAR: self.CREATE_CREDITS,
            InodeKind.SYMLINK: self.CREATE_CREDITS + 2,
            InodeKind.DIRECTORY: self.MKDIR_CREDITS,
        }[kind]
        event = {InodeKind.SYMLINK: "symlink", InodeKind.DIRECTORY: "mkdir"}.get(kind, "create")
        events = (event, "open") if flags is not None else (event,)
        credits = base + min(self.sb.block_bitmap_len, 6)
        parent = self._iget(parent_ino)

        with self._transaction(credits, *events) as h:
            with parent.lock:
                self._require_dir(parent)
                if parent.disk.nlink == 0:
                    raise FsError(errno.ENOENT, "parent directory was removed")
                tree = self._dir(parent, h)
                if tree.lookup(raw) is not None:
                    raise FsError(errno.EEXIST, name)
                own = {InodeKind.DIRECTORY: 2, InodeKind.SYMLINK: 1}.get(kind, 0)
                grow = self.DIR_GROW_BLOCKS if tree.needs_split(raw) else 0
                with self.alloc.reservation(own + grow) as grant:
                    inode = self._ialloc(h, ctx, kind, perm)
                    with inode.lock:
                        try:
                            if kind == InodeKind.DIRECTORY:
                                inode.disk.nlink = 2
                                self._dir(inode, h, grant).format(inode.ino, parent.ino)
                            elif kind == InodeKind.SYMLINK:
                                blockno = self._bmap(h, inode, 0, grant)
                                with self.dev.getblk(blockno) as bh:
                                    bh.fill(target)
                                    h.write(bh)
                                inode.disk.size = len(target)
                            self._iupdate(h, inode)
                            self._dir(parent, h, grant).insert(raw, inode.ino)
                        except Exception:
                            inode.disk.nlink = 0
                            self._free_inode(h, inode)
                            raise
                        if kind == InodeKind.DIRECTORY:
                            parent.disk.nlink += 1
                        self._touch(parent)
                        self._iupdate(h, parent)

                        if kind == InodeKind.SYMLINK:
                            self._after_symlink(
                                h, ctx, parent.ino, name, inode.ino, target.decode("utf-8", "surrogateescape"),
                            )
                        else:
                            self._after_create(h, ctx, parent.ino, name, inode.ino)

                        fh = None
                        if flags is not None:
                            inode.open_count += 1
                            fh = self._new_handle(inode.ino, flags, ctx.pid)
                            self._after_open(h, ctx, inode.ino, fh, flags)
                        entry = self._entry(inode)
        logger.debug("created %s %r in %d as inode %d", kind.name.lower(), name, parent_ino, inode.ino)
        return entry, fh

    def bento_create(self, ctx: RequestContext, args: CreateArgs) -> CreatedReply:
        flags = args.flags & ~(os.O_CREAT | os.O_EXCL | os.O_TRUNC)
        entry, fh = self._create_common(
            ctx, args.parent, args.name, InodeKind.REGULAR, stat.S_IMODE(args.mode), flags=flags,
        )
        return CreatedReply(ino=entry.ino, attr=entry.attr, generation=entry.generation, fh=fh)

    def bento_mknod(self, ctx: RequestContext, args: MknodArgs) -> EntryReply:
        fmt = stat.S_IFMT(args.mode)
        if fmt not in (0, stat.S_IFREG):
            raise FsError(errno.EINVAL, "only regular files can be created with mknod")
        entry, _ = self._create_common(ctx, args.parent, args.name, InodeKind.REGULAR, stat.S_IMODE(args.mode))
        return entry

    def bento_mkdir(self, ctx: RequestContext, args: MkdirArgs) -> EntryReply:
        entry, _ = self._create_common(ctx, args.parent, args.name, InodeKind.DIRECTORY, stat.S_IMODE(args.mode))
        return entry

    def bento_symlink(self, ctx: RequestContext, args: SymlinkArgs) -> EntryReply:
        target = args.link.encode("utf-8", "surrogateescape")
        if not target:
            raise FsError(errno.ENOENT, "empty symlink target")
        if len(target) > min(self.sb.block_size, 4096) - 1:
            raise FsError(errno.ENAMETOOLONG, "symlink target too long")
        entry, _ = self._create_common(ctx, args.parent, args.name, InodeKind.SYMLINK, 0o777, target=target)
        return entry

    def bento_link(self, ctx: RequestContext, args: LinkArgs) -> EntryReply:
        self._require_mounted()
        raw = encode_name(args.newname)
        credits = self.DIR_INSERT_CREDITS + 3 + min(self.sb.block_bitmap_len, 3)
        target = self._iget(args.ino)
        newparent = self._iget(args.newparent)
        if target.is_dir:
            raise FsError(errno.EPERM, "hard links to directories are not allowed")
        with self._transaction(credits) as h:
            with self._locked(target, newparent):
                self._require_dir(newparent)
                if newparent.disk.nlink == 0 or target.disk.nlink == 0:
                    raise FsError(errno.ENOENT, "link source or target directory was removed")
                tree = self._dir(newparent, h)
                if tree.lookup(raw) is not None:
                    raise FsError(errno.EEXIST, args.newname)
                grow = self.DIR_GROW_BLOCKS if tree.needs_split(raw) else 0
                with self.alloc.reservation(grow) as grant:
                    self._dir(newparent, h, grant).insert(raw, target.ino)
                target.disk.nlink += 1
                self._touch(target, mtime=False)
                self._iupdate(h, target)
                self._touch(newparent)
                self._iupdate(h, newparent)
                return self._entry(target)

    def _remove(self, ctx: RequestContext, parent_ino: int, name: str, want_dir: bool) -> None:
        self._require_mounted()
        raw = encode_name(name)
        if raw == b".":
            raise FsError(errno.EINVAL if want_dir else errno.EISDIR, name)
        if raw == b"..":
            raise FsError(errno.ENOTEMPTY if want_dir else errno.EISDIR, name)
        parent = self._iget(parent_ino)
        credits = self.REMOVE_CREDITS + self.sb.block_bitmap_len

        with self._transaction(credits, "rmdir" if want_dir else "unlink") as h:
            while True:
                ino = self._lookup_ino(parent, raw)
                if ino is None:
                    raise FsError(errno.ENOENT, name)
                child = self._iget(ino)
                with self._locked(parent, child):
                    tree = self._dir(parent, h)
                    if tree.lookup(raw) != ino:
                        continue
                    if want_dir and not child.is_dir:
                        raise FsError(errno.ENOTDIR, name)
                    if not want_dir and child.is_dir:
                        raise FsError(errno.EISDIR, name)
                    if want_dir and not self._dir(child).is_empty():
                        raise FsError(errno.ENOTEMPTY, name)
                    tree.remove(raw)
                    if want_dir:
                        child.disk.nlink = 0
                        parent.disk.nlink -= 1
                    else:
                        child.disk.nlink -= 1
                    self._touch(parent)
                    self._iupdate(h, parent)
                    self._touch(child, mtime=False)
                    self._iupdate(h, child)
                    deleted = child.disk.nlink == 0
                    self._after_unlink(h, ctx, parent.ino, name, child.ino, deleted)
                    self._maybe_free(h, child)
                    return

    def bento_unlink(self, ctx: RequestContext, args: UnlinkArgs) -> OkReply:
        self._remove(ctx, args.parent, args.name, want_dir=False)
        return OkReply()

    def bento_rmdir(self, ctx: RequestContext, args: RmdirArgs) -> OkReply:
        self._remove(ctx, args.parent, args.name, want_dir=True)
        return OkReply()

    def _is_ancestor(self, ancestor: int, ino: int) -> bool:
        """True when `ancestor` is ino or lies on ino's path to the root."""
        seen = set()
        while True:
            if ino == ancestor:
                return True
            if ino == ROOT_INO or ino in seen:
                return False
            seen.add(ino)
            inode = self._iget(ino)
            with inode.lock:
                up = self._dir(inode).lookup(b"..")
            if up is None:
                return False
            ino = up

    def bento_rename(self, ctx: RequestContext, args: RenameArgs) -> OkReply:
        self._require_mounted()
        if args.flags & RENAME_EXCHANGE or args.flags & ~(RENAME_NOREPLACE | RENAME_EXCHANGE):
            raise FsError(errno.EINVAL, "unsupported rename flags")
        raw = encode_name(args.name)
        new_raw = encode_name(args.newname)
        if raw in (b".", b"..") or new_raw in (b".", b".."):
            raise FsError(errno.EINVAL, "cannot rename '.' or '..'")
        parent = self._iget(args.parent)
        newparent = self._iget(args.newparent)
        credits = self.RENAME_CREDITS + self.sb.block_bitmap_len

        with self._transaction(credits, "rename") as h, self._rename_lock:
            while True:
                src_ino = self._lookup_ino(parent, raw)
                if src_ino is None:
                    raise FsError(errno.ENOENT, args.name)
                dst_ino = self._lookup_ino(newparent, new_raw)
                src = self._iget(src_ino)
                dst = self._iget(dst_ino) if dst_ino is not None else None
                cycle = src.is_dir and parent is not newparent and self._is_ancestor(src.ino, newparent.ino)
                locked = [parent, newparent, src] + ([dst] if dst is not None else [])
                with self._locked(*locked):
                    tree = self._dir(parent, h)
                    new_tree = self._dir(newparent, h) if newparent is not parent else tree
                    if tree.lookup(raw) != src_ino or new_tree.lookup(new_raw) != dst_ino:
                        continue
                    if dst is not None and args.flags & RENAME_NOREPLACE:
                        raise FsError(errno.EEXIST, args.newname)
                    if dst is not None and dst.ino == src.ino:
                        return OkReply()
                    if newparent.disk.nlink == 0:
                        raise FsError(errno.ENOENT, "target directory was removed")
                    if cycle:
                        raise FsError(errno.EINVAL, "cannot move a directory under itself")
                    if dst is not None:
                        if src.is_dir and not dst.is_dir:
                            raise FsError(errno.ENOTDIR, args.newname)
                        if not src.is_dir and dst.is_dir:
                            raise FsError(errno.EISDIR, args.newname)
                        if dst.is_dir and not self._dir(dst).is_empty():
                            raise FsError(errno.ENOTEMPTY, args.newname)

                    if dst is not None:
                        new_tree.replace(new_raw, src.ino)
                        if dst.is_dir:
                            dst.disk.nlink = 0
                            newparent.disk.nlink -= 1
                        else:
                            dst.disk.nlink -= 1
                        self._touch(dst, mtime=False)
                        self._iupdate(h, dst)
                    else:
                        grow = self.DIR_GROW_BLOCKS if new_tree.needs_split(new_raw) else 0
                        with self.alloc.reservation(grow) as grant:
                            self._dir(newparent, h, grant).insert(new_raw, src.ino)
                    # reloaded: the insert may have split a leaf of the same directory
                    self._dir(parent, h).remove(raw)
                    if src.is_dir and parent is not newparent:
                        self._dir(src, h).replace(b"..", newparent.ino)
                        parent.disk.nlink -= 1
                        newparent.disk.nlink += 1
                    self._touch(src, mtime=False)
                    self._iupdate(h, src)
                    self._touch(parent)
                    self._iupdate(h, parent)
                    if newparent is not parent:
                        self._touch(newparent)
                        self._iupdate(h, newparent)
                    self._after_rename(h, ctx, parent.ino, args.name, newparent.ino, args.newname, src.ino, args.flags)
                    if dst is not None:
                        self._maybe_free(h, dst)
                    return OkReply()

    # ------------------------------------------------------------------
    # Attributes
    # ------------------------------------------------------------------

    def bento_getattr(self, ctx: RequestContext, args: GetattrArgs) -> AttrReply:
        self._require_mounted()
        inode = self._iget(args.ino)
        with inode.lock:
            return AttrReply(attr=self._attr(inode))

    def bento_setattr(self, ctx: RequestContext, args: SetattrArgs) -> AttrReply:
        self._require_mounted()
        inode = self._iget(args.ino)
        if args.size is not None:
            if inode.is_dir:
                raise FsError(errno.EISDIR, "cannot truncate a directory")
            if args.size > self.sb.max_file_size:
                raise FsError(errno.EFBIG, "size beyond the file size cap")
        credits = self.TRUNCATE_CREDITS + (self.sb.block_bitmap_len if args.size is not None else 0)
        with self._transaction(credits) as h:
            with inode.lock:
                d = inode.disk
                if args.mode is not None:
                    d.perm = stat.S_IMODE(args.mode)
                if args.uid is not None:
                    d.uid = args.uid
                if args.gid is not None:
                    d.gid = args.gid
                if args.size is not None and args.size != d.size:
                    if args.size < d.size:
                        self._truncate_blocks(h, inode, args.size)
                    else:
                        d.size = args.size
                    d.mtime_ns = self.clock()
                if args.atime_ns is not None:
                    d.atime_ns = args.atime_ns
                if args.mtime_ns is not None:
                    d.mtime_ns = args.mtime_ns
                d.ctime_ns = self.clock()
                self._iupdate(h, inode)
                return AttrReply(attr=self._attr(inode))

    def bento_readlink(self, ctx: RequestContext, args: ReadlinkArgs) -> DataReply:
        self._require_mounted()
        inode = self._iget(args.ino)
        with inode.lock:
            if inode.kind != InodeKind.SYMLINK:
                raise FsError(errno.EINVAL, f"inode {inode.ino} is not a symlink")
            blockno = self._bmap(None, inode, 0)
            if not blockno:
                return DataReply(data=b"")
            with self.dev.bread(blockno) as bh:
                return DataReply(data=bytes(bh.data[:inode.disk.size]))

    def bento_access(self, ctx: RequestContext, args: AccessArgs) -> OkReply:
        self._require_mounted()
        inode = self._iget(args.ino)
        mask = args.mask & (os.R_OK | os.W_OK | os.X_OK)
        if mask == 0:
            return OkReply()
        perm = inode.disk.perm
        if ctx.uid == 0:
            if mask & os.X_OK and not inode.is_dir and not perm & 0o111:
                raise FsError(errno.EACCES, "no execute bit set")
            return OkReply()
        if ctx.uid == inode.disk.uid:
            bits = (perm >> 6) & 7
        elif ctx.gid == inode.disk.gid:
            bits = (perm >> 3) & 7
        else:
            bits = perm & 7
        if mask & ~bits:
            raise FsError(errno.EACCES, f"mask {mask:o} denied by mode {perm:o}")
        return OkReply()

    def bento_statfs(self, ctx: RequestContext, args: StatfsArgs) -> StatfsReply:
        self._require_mounted()
        return StatfsReply(
            blocks=self.sb.total_blocks,
            bfree=self.alloc.free_blocks,
            files=self.sb.inode_count,
            ffree=self.alloc.free_inodes,
            bsize=self.sb.block_size,
            namelen=NAME_MAX,
        )

    # ------------------------------------------------------------------
    # File I/O
    # ------------------------------------------------------------------

    def bento_open(self, ctx: RequestContext, args: OpenArgs) -> OpenReply:
        self._require_mounted()
        inode = self._iget(args.ino)
        if inode.is_dir and (args.flags & os.O_ACCMODE) != os.O_RDONLY:
            raise FsError(errno.EISDIR, "directories open read-only")
        truncate = bool(args.flags & os.O_TRUNC) and (args.flags & os.O_ACCMODE) != os.O_RDONLY
        events = () if inode.is_dir else ("open",)
        credits = self.TRUNCATE_CREDITS + self.sb.block_bitmap_len if truncate else 0
        flags = args.flags & ~(os.O_CREAT | os.O_EXCL | os.O_TRUNC)

        if credits + self._hook_credits(*events) == 0:
            with inode.lock:
                inode.open_count += 1
                return OpenReply(fh=self._new_handle(inode.ino, flags, ctx.pid))
        with self._transaction(credits, *events) as h:
            with inode.lock:
                if truncate and inode.disk.size:
                    self._truncate_blocks(h, inode, 0)
                    self._touch(inode)
                    self._iupdate(h, inode)
                inode.open_count += 1
                fh = self._new_handle(inode.ino, flags, ctx.pid)
                if events:
                    self._after_open(h, ctx, inode.ino, fh, flags)
                return OpenReply(fh=fh)

    def bento_read(self, ctx: RequestContext, args: ReadArgs) -> DataReply:
        self._require_mounted()
        inode = self._iget(args.ino)
        if inode.is_dir:
            raise FsError(errno.EISDIR, "read on a directory")
        open_file = self._handle(args.ino, args.fh)
        if not open_file.readable:
            raise FsError(errno.EBADF, f"fh {args.fh} not open for reading")
        bsize = self.sb.block_size
        with inode.lock:
            size = inode.disk.size
            if args.offset >= size or args.size == 0:
                return DataReply(data=b"")
            end = min(size, args.offset + args.size)
            out = bytearray()
            pos = args.offset
            while pos < end:
                lblk, within = divmod(pos, bsize)
                take = min(bsize - within, end - pos)
                blockno = self._bmap(None, inode, lblk)
                if blockno:
                    with self.dev.bread(blockno) as bh:
                        out += bh.data[within:within + take]
                else:
                    out += bytes(take)
                pos += take
            return DataReply(data=bytes(out))

    def _write_credits(self, nblocks: int) -> int:
        return nblocks + self.WRITE_OVERHEAD_CREDITS + min(self.sb.block_bitmap_len, 2 * nblocks)

    def bento_write(self, ctx: RequestContext, args: WriteArgs) -> WrittenReply:
        """
        Write in block-aligned chunks of WRITE_CHUNK_BLOCKS, each one journal
        transaction. ENOSPC after the first chunk yields a short write.
        """
        self._require_mounted()
        open_file = self._handle(args.ino, args.fh)
        if not open_file.writable:
            raise FsError(errno.EBADF, f"fh {args.fh} not open for writing")
        inode = self._iget(args.ino)
        if inode.is_dir:
            raise FsError(errno.EISDIR, "write on a directory")
        data = args.data
        if not data:
            return WrittenReply(count=0)
        append = bool((open_file.flags | args.flags) & os.O_APPEND)
        offset = args.offset
        if not append and offset + len(data) > self.sb.max_file_size:
            raise FsError(errno.EFBIG, f"write ends past {self.sb.max_file_size} bytes")

        bsize = self.sb.block_size
        chunk_bytes = self._chunk_blocks * bsize
        written = 0
        while written < len(data):
            with self._transaction(self._write_credits(self._chunk_blocks)) as h:
                with inode.lock:
                    if append and written == 0:
                        offset = inode.disk.size
                        if offset + len(data) > self.sb.max_file_size:
                            raise FsError(errno.EFBIG, f"append ends past {self.sb.max_file_size} bytes")
                    pos = offset + written
                    limit = min(len(data), written + (chunk_bytes - pos % chunk_bytes))
                    try:
                        while written < limit:
                            pos = offset + written
                            lblk, within = divmod(pos, bsize)
                            take = min(bsize - within, limit - written)
                            blockno = self._bmap(h, inode, lblk)
                            with self.dev.getblk(blockno) as bh:
                                bh.write(within, data[written:written + take])
                                h.write(bh)
                            written += take
                    except FsError as e:
                        if e.errno != errno.ENOSPC or written == 0:
                            self._finish_write(h, inode, offset + written)
                            raise
                        self._finish_write(h, inode, offset + written)
                        return WrittenReply(count=written)
                    self._finish_write(h, inode, offset + written)
        return WrittenReply(count=written)

    def _finish_write(self, h: TransactionHandle, inode: CachedInode, end: int) -> None:
        if end > inode.disk.size:
            inode.disk.size = end
        self._touch(inode)
        self._iupdate(h, inode)

    def bento_flush(self, ctx: RequestContext, args: FlushArgs) -> OkReply:
        self._require_mounted()
        self._handle(args.ino, args.fh)
        return OkReply()

    def _release(self, ctx: RequestContext, ino: int, fh: int, is_dir: bool) -> None:
        with self._handle_lock:
            open_file = self._handles.get(fh)
            if open_file is None or open_file.ino != ino or open_file.is_dir != is_dir:
                raise FsError(errno.EBADF, f"fh {fh} is not open on inode {ino}")
            del self._handles[fh]
        inode = self.inodes.get(ino)
        events = () if is_dir or inode.is_dir else ("close",)
        with inode.lock:
            inode.open_count -= 1
            orphaned = inode.open_count == 0 and inode.disk.nlink == 0 and inode.disk.kind != InodeKind.FREE
        credits = self._free_credits() if orphaned else 0
        if credits + self._hook_credits(*events) == 0:
            return
        with self._transaction(credits, *events) as h:
            with inode.lock:
                if events:
                    self._after_close(h, ctx, ino, fh, open_file.flags)
                if inode.open_count == 0 and inode.disk.nlink == 0 and inode.disk.kind != InodeKind.FREE:
                    self._free_inode(h, inode)

    def bento_release(self, ctx: RequestContext, args: ReleaseArgs) -> OkReply:
        """Drop a handle; the last close of an unlinked file discards its unwritten data and frees it."""
        self._require_mounted()
        self._release(ctx, args.ino, args.fh, is_dir=False)
        return OkReply()

    def bento_fsync(self, ctx: RequestContext, args: FsyncArgs) -> OkReply:
        self._require_mounted()
        self._handle(args.ino, args.fh)
        self.journal.force_commit()
        self.dev.flush()
        return OkReply()

    # ------------------------------------------------------------------
    # Directories
    # ------------------------------------------------------------------

    def bento_opendir(self, ctx: RequestContext, args: OpendirArgs) -> OpenReply:
        self._require_mounted()
        inode = self._iget(args.ino)
        with inode.lock:
            self._require_dir(inode)
            inode.open_count += 1
            return OpenReply(fh=self._new_handle(inode.ino, os.O_RDONLY, ctx.pid, is_dir=True))

    def bento_readdir(self, ctx: RequestContext, args: ReaddirArgs) -> DirEntriesReply:
        """Entries in hash order after `offset`, within a byte budget of `size`."""
        self._require_mounted()
        self._handle(args.ino, args.fh, is_dir=True)
        inode = self._iget(args.ino)
        entries: list[DirEntry] = []
        used = 0
        with inode.lock:
            for cookie, raw, ino in self._dir(inode).entries(args.offset):
                cost = (24 + len(raw) + 7) & ~7
                if entries and used + cost > args.size:
                    break
                try:
                    kind = self.inodes.get(ino).disk.kind.file_kind
                except KeyError:
                    logger.warning("directory %d names free inode %d", inode.ino, ino)
                    continue
                entries.append(DirEntry(ino=ino, kind=kind, name=decode_name(raw), next_offset=cookie))
                used += cost
                if used >= args.size:
                    break
        return DirEntriesReply(entries=entries)

    def bento_releasedir(self, ctx: RequestContext, args: ReleasedirArgs) -> OkReply:
        self._require_mounted()
        self._release(ctx, args.ino, args.fh, is_dir=True)
        return OkReply()

    def bento_fsyncdir(self, ctx: RequestContext, args: FsyncdirArgs) -> OkReply:
        self._require_mounted()
        self._handle(args.ino, args.fh, is_dir=True)
        self.journal.force_commit()
        self.dev.flush()
        return OkReply()

    # ------------------------------------------------------------------
    # Introspection used by the harness
    # ------------------------------------------------------------------

    def sync(self) -> int:
        """Commit everything outstanding; returns the last committed sequence."""
        self._require_mounted()
        seq = self.journal.force_commit()
        self.dev.flush()
        return seq
