"""
Bento-prov: Bento-fs that also records file lifecycle and access events.

Every create, rename, symlink, unlink, open and close appends a record to
the provenance log (inode 2) inside the operation's own journal handle, so
a crash never separates an operation from its record.
"""

import errno
import logging
import threading
from contextlib import ExitStack, contextmanager
from typing import Iterator, Optional

from app.core.errors import FsError
from app.filesystems.bento_fs import BentoFs, BlockGrant
from app.filesystems.layout import PROV_INO, Clock, InodeKind
from app.filesystems.provenance import FH_EPOCH_BITS, FH_LIMIT, encode_record, next_epoch_fh, prov_parse, rw_mode_for
from app.models.schemas import ProvenanceRecord, ProvKind, RequestContext
from app.services.blockdev import BlockDevice
from app.services.journal import TransactionHandle
from app.services.live_upgrade import ProvenanceState, TransferCapsule

logger = logging.getLogger(__name__)

# Blocks one appended record can need: two data blocks plus the pointer
# blocks for crossing into the indirect or double-indirect range.
APPEND_BLOCKS = 4
LOGGED_EVENTS = frozenset({"create", "symlink", "unlink", "rename", "open", "close"})


class BentoProv(BentoFs):
    """Bento-fs with a provenance log."""

    variant = "bentoprov"
    capsule_version = 1
    accepts_capsule_version = 1

    def __init__(self, device: Optional[BlockDevice] = None, clock: Optional[Clock] = None, enabled: bool = True):
        super().__init__(device, clock)
        self.prov = ProvenanceState(enabled=enabled, log_ino=PROV_INO)
        self._seq_lock = threading.Lock()
        self._grants = threading.local()

    # ------------------------------------------------------------------
    # Mount and upgrade state
    # ------------------------------------------------------------------

    def _mount_hook(self) -> None:
        """Resume sequence numbers after the log's last record and start a new handle epoch."""
        records = prov_parse(self._read_log()).records
        self.prov.next_seq = records[-1].seq + 1 if records else 1
        highest = max((r.fh for r in records if r.kind in (ProvKind.OPEN, ProvKind.CLOSE)), default=0)
        first_fh = next_epoch_fh(highest)
        with self._handle_lock:
            if first_fh + (1 << FH_EPOCH_BITS) > FH_LIMIT:
                logger.warning("provenance handle epochs exhausted; numbering continues from %d", self._next_fh)
            else:
                self._next_fh = max(self._next_fh, first_fh)
        logger.info(
            "provenance log holds %d records; next seq %d, next fh %d",
            len(records), self.prov.next_seq, self._next_fh,
        )

    def _provenance_state(self) -> Optional[ProvenanceState]:
        return ProvenanceState(self.prov.enabled, self.prov.log_ino, self.prov.next_seq)

    def _adopt_provenance(self, capsule: TransferCapsule) -> None:
        """Capsules of format 0 carry no provenance state; start after the log's last record."""
        if capsule.provenance is None:
            self.prov = ProvenanceState(enabled=self.prov.enabled, log_ino=PROV_INO)
            self._mount_hook()
            return
        self.prov = ProvenanceState(capsule.provenance.enabled, capsule.provenance.log_ino, capsule.provenance.next_seq)

    # ------------------------------------------------------------------
    # Log I/O
    # ------------------------------------------------------------------

    def _read_log(self) -> bytes:
        log = self.inodes.get(self.prov.log_ino)
        bsize = self.sb.block_size
        with log.lock:
            size = log.disk.size
            out = bytearray()
            for lblk in range(-(-size // bsize)):
                blockno = self._bmap(None, log, lblk)
                if blockno:
                    with self.dev.bread(blockno) as bh:
                        out += bh.data
                else:
                    out += bytes(bsize)
            return bytes(out[:size])

    def read_log(self) -> list[ProvenanceRecord]:
        """Records currently in the log, in sequence order."""
        self._require_mounted()
        return prov_parse(self._read_log()).records

    def _hook_credits(self, *events: str) -> int:
        logged = self._logged(events)
        if not logged:
            return 0
        per_event = APPEND_BLOCKS + 1 + min(self.sb.block_bitmap_len, APPEND_BLOCKS)
        return per_event * logged

    def _hooks_reserved(self, *events: str):
        logged = self._logged(events)
        if not logged:
            return super()._hooks_reserved(*events)
        return self._reserve(APPEND_BLOCKS * logged)

    def _logged(self, events: tuple[str, ...]) -> int:
        if not self.prov.enabled:
            return 0
        return sum(1 for event in events if event in LOGGED_EVENTS)

    @contextmanager
    def _reserve(self, count: int) -> Iterator[BlockGrant]:
        with ExitStack() as stack:
            grant = stack.enter_context(self.alloc.reservation(count))
            self._grants.current = grant
            stack.callback(setattr, self._grants, "current", None)
            yield grant

    def _append(self, h: TransactionHandle, record: ProvenanceRecord) -> None:
        """Append one record at the log's end inside h."""
        log = self.inodes.get(self.prov.log_ino)
        bsize = self.sb.block_size
        grant = getattr(self._grants, "current", None)
        with log.lock:
            with self._seq_lock:
                record.seq = self.prov.next_seq
                self.prov.next_seq += 1
            data = encode_record(record)
            offset = log.disk.size
            if offset + len(data) > self.sb.max_file_size:
                raise FsError(errno.ENOSPC, "provenance log is full")
            done = 0
            while done < len(data):
                lblk, within = divmod(offset + done, bsize)
                take = min(bsize - within, len(data) - done)
                blockno = self._bmap(h, log, lblk, grant)
                with self.dev.getblk(blockno) as bh:
                    bh.write(within, data[done:done + take])
                    h.write(bh)
                done += take
            log.disk.size = offset + len(data)
            log.disk.mtime_ns = log.disk.ctime_ns = self.clock()
            self._iupdate(h, log)
        logger.debug("provenance %s seq %d pid %d ino %d", record.kind.value, record.seq, record.pid, record.ino)

    def _log(self, h: TransactionHandle, ctx: RequestContext, kind: ProvKind, **fields) -> None:
        if not self.prov.enabled:
            return
        self._append(h, ProvenanceRecord(seq=0, kind=kind, pid=ctx.pid, **fields))

    # ------------------------------------------------------------------
    # Hooks
    # ------------------------------------------------------------------

    def _after_create(self, h, ctx, parent: int, name: str, ino: int) -> None:
        if self.inodes.get(ino).kind == InodeKind.DIRECTORY:
            return
        self._log(h, ctx, ProvKind.CREATE, ino=ino, parent=parent, name=name)

    def _after_symlink(self, h, ctx, parent: int, name: str, ino: int, target: str) -> None:
        self._log(h, ctx, ProvKind.SYMLINK, ino=ino, parent=parent, name=name, newname=target)

    def _after_unlink(self, h, ctx, parent: int, name: str, ino: int, deleted: bool) -> None:
        if self.inodes.get(ino).kind == InodeKind.DIRECTORY:
            return
        self._log(h, ctx, ProvKind.UNLINK, ino=ino, parent=parent, name=name, deleted=deleted)

    def _after_rename(self, h, ctx, parent: int, name: str, newparent: int, newname: str, ino: int, flags: int) -> None:
        self._log(
            h, ctx, ProvKind.RENAME, ino=ino, parent=parent, name=name,
            newparent=newparent, newname=newname, flags=flags,
        )

    def _after_open(self, h, ctx, ino: int, fh: int, flags: int) -> None:
        self._log(h, ctx, ProvKind.OPEN, ino=ino, fh=fh, flags=flags, rw_mode=rw_mode_for(flags))

    def _after_close(self, h, ctx, ino: int, fh: int, flags: int) -> None:
        self._log(h, ctx, ProvKind.CLOSE, ino=ino, fh=fh, flags=flags)
