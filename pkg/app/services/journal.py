"""
Write-ahead data journal in the style of JBD2.

Handles join one running compound transaction; a dedicated committer
thread writes descriptor, data copies and commit block into a circular
log region, and checkpoints committed records to their home blocks lazily,
oldest first, when log space is needed or on demand.

On-disk format, little-endian u32 fields, region [start, start + length):

    start               journal superblock  {magic, tail_seq, tail_offset}
    start + 1 + pos     log area of length - 1 blocks, circular
        descriptor      {magic, sequence, count, target[count]}
        data            count full block copies
        commit          {magic, sequence, ..., fnv1a32(descriptor + data) in last 4 bytes}
"""

import itertools
import logging
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

from app.core.config import settings
from app.services.blockdev import BlockDevice, BufferHead

logger = logging.getLogger(__name__)

JOURNAL_MAGIC = 0x42454E4A  # "BENJ"
MIN_JOURNAL_LEN = 8
_HEADER = struct.Struct("<III")
_FNV_OFFSET = 0x811C9DC5
_FNV_PRIME = 0x01000193


class JournalError(Exception):
    """Exception raised when the journal cannot serve a request."""
    pass


class RegionTooSmall(JournalError):
    pass


class CreditsExceedJournal(JournalError):
    pass


class CreditOverflow(JournalError):
    pass


class HandleClosed(JournalError):
    pass


def fnv1a32(*chunks: bytes) -> int:
    """32-bit FNV-1a over the concatenation of chunks."""
    h = _FNV_OFFSET
    for chunk in chunks:
        for byte in chunk:
            h ^= byte
            h = (h * _FNV_PRIME) & 0xFFFFFFFF
    return h


@dataclass
class _Transaction:
    tid: int
    blocks: dict[int, bytes] = field(default_factory=dict)
    discards: set[int] = field(default_factory=set)
    handles: int = 0
    reserved: int = 0
    locked: bool = False
    first_capture: Optional[float] = None


@dataclass
class _Record:
    """A committed transaction still occupying log space."""

    tid: int
    seq: int
    offset: int
    nblocks: int
    home: dict[int, bytes]


class TransactionHandle:
    """A reservation of `credits` distinct blocks in the running transaction."""

    def __init__(self, journal: "Journal", txn: Optional[_Transaction], credits: int):
        self._journal = journal
        self._txn = txn
        self.credits = credits
        self.used = 0
        self.closed = False
        self._captured: set[int] = set()

    @property
    def tid(self) -> int:
        return self._txn.tid if self._txn is not None else 0

    def write(self, bh: BufferHead) -> None:
        self._journal.journal_write(self, bh)

    def discard(self, blocknos: Iterable[int]) -> None:
        self._journal.discard(self, blocknos)

    def __enter__(self) -> "TransactionHandle":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self._journal.end_op(self)


class Journal:
    """Journal over a region of a block device. Create it with journal_init()."""

    def __init__(
        self,
        dev: BlockDevice,
        start: int,
        length: int,
        commit_interval_ms: Optional[int] = settings.COMMIT_INTERVAL_MS,
        enabled: bool = True,
    ):
        if length < MIN_JOURNAL_LEN:
            raise RegionTooSmall(f"journal of {length} blocks is below {MIN_JOURNAL_LEN}")
        if start < 0 or start + length > dev.block_count:
            raise RegionTooSmall(f"journal [{start}, {start + length}) outside device")
        self.dev = dev
        self.start = start
        self.length = length
        self.area = length - 1
        self.max_targets = (dev.block_size - _HEADER.size) // 4
        self.enabled = enabled
        self.commit_interval = commit_interval_ms / 1000.0 if commit_interval_ms else None
        self.sequence = 1

        self._cond = threading.Condition(threading.Lock())
        self._tids = itertools.count(1)
        self._running: Optional[_Transaction] = None
        self._committing: Optional[_Transaction] = None
        self._records: deque[_Record] = deque()
        self._used = 0
        self._reserved = 0
        self._head = 0
        self._done_tid = 0
        self._force_tid = 0
        self._space_waiters = 0
        self._checkpoint_all = False
        self._stopping = False
        self._failed: Optional[BaseException] = None
        self._thread: Optional[threading.Thread] = None
        self.commits = 0
        self.checkpoints = 0

    # ------------------------------------------------------------------
    # Region helpers
    # ------------------------------------------------------------------

    def _log_block(self, pos: int) -> int:
        return self.start + 1 + (pos % self.area)

    def _write_super(self, tail_seq: int, tail_offset: int) -> None:
        block = bytearray(self.dev.block_size)
        _HEADER.pack_into(block, 0, JOURNAL_MAGIC, tail_seq, tail_offset)
        self.dev.write_block(self.start, bytes(block))

    def _read_super(self) -> Optional[tuple[int, int]]:
        magic, tail_seq, tail_offset = _HEADER.unpack_from(self.dev.read_block(self.start))
        if magic != JOURNAL_MAGIC or tail_offset >= self.area or tail_seq == 0:
            return None
        return tail_seq, tail_offset

    def format(self) -> None:
        """Zero the region and write an empty journal superblock (sequence 1)."""
        zero = bytes(self.dev.block_size)
        for blockno in range(self.start + 1, self.start + self.length):
            self.dev.write_block(blockno, zero)
        self._write_super(1, 0)
        self.dev.flush()
        self.sequence = 1
        self._head = 0

    # ------------------------------------------------------------------
    # Recovery
    # ------------------------------------------------------------------

    def scan(self) -> tuple[list[tuple[int, list[tuple[int, bytes]]]], int]:
        """
        Read the committed records from the tail without changing anything.

        Returns:
            ([(sequence, [(target, block), ...]), ...], sequence recovery
            resumes at); a torn record at the end consumes its sequence

        Raises:
            JournalError: If the journal superblock is missing or corrupt
        """
        state = self._read_super()
        if state is None:
            raise JournalError("journal superblock missing or corrupt")
        seq, pos = state
        scanned = 0
        torn = False
        bsize = self.dev.block_size
        records = []

        while scanned < self.area:
            desc = self.dev.read_block(self._log_block(pos))
            magic, dseq, count = _HEADER.unpack_from(desc)
            if magic != JOURNAL_MAGIC or dseq != seq:
                break
            if count == 0 or count > self.max_targets or count + 2 > self.area - scanned:
                break
            targets = struct.unpack_from(f"<{count}I", desc, _HEADER.size)
            data = [self.dev.read_block(self._log_block(pos + 1 + i)) for i in range(count)]
            commit = self.dev.read_block(self._log_block(pos + 1 + count))
            cmagic, cseq = struct.unpack_from("<II", commit)
            (checksum,) = struct.unpack_from("<I", commit, bsize - 4)
            if cmagic != JOURNAL_MAGIC or cseq != seq or checksum != fnv1a32(desc, *data):
                torn = True
                break
            records.append((seq, list(zip(targets, data))))
            seq += 1
            pos = (pos + count + 2) % self.area
            scanned += count + 2

        return records, seq + 1 if torn else seq

    def recover(self) -> int:
        """
        Replay every committed record from the tail, in sequence order.

        Stops at the first missing or invalid commit block, flushes, and
        resets the log to start empty at offset 0. Running it twice leaves
        the device unchanged the second time.

        Returns:
            Number of transactions applied
        """
        records, next_seq = self.scan()
        applied = 0
        for seq, writes in records:
            for target, block in writes:
                if not 0 <= target < self.dev.block_count:
                    raise JournalError(f"record {seq} targets block {target} outside device")
                self.dev.write_block(target, block)
            logger.debug("replayed journal record %d (%d blocks)", seq, len(writes))
            applied += 1

        self.dev.flush()
        self._write_super(next_seq, 0)
        self.dev.flush()
        self.sequence = next_seq
        self._head = 0
        if applied:
            logger.info("journal recovery applied %d transactions", applied)
        return applied

    # ------------------------------------------------------------------
    # Lifecycle
    # ------------------------------------------------------------------

    def start_committer(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(target=self._committer, name=f"journal-commit-{self.dev.name}", daemon=True)
        self._thread.start()

    def close(self) -> None:
        """Commit everything, checkpoint everything, stop the committer."""
        if self._thread is None:
            return
        self.force_commit()
        self.checkpoint()
        with self._cond:
            self._stopping = True
            self._cond.notify_all()
        self._thread.join()
        self._thread = None

    # ------------------------------------------------------------------
    # Handles
    # ------------------------------------------------------------------

    def begin_op(self, credits: int) -> TransactionHandle:
        """
        Reserve `credits` blocks in the running transaction.

        Blocks while the running transaction is closing or the log lacks
        space; never fails for credits that fit in an empty journal.
        """
        if credits < 1:
            raise ValueError("credits must be at least 1")
        limit = min(self.area - 2, self.max_targets)
        if credits > limit:
            raise CreditsExceedJournal(f"{credits} credits exceed journal capacity {limit}")
        if not self.enabled:
            return TransactionHandle(self, None, credits)

        with self._cond:
            waiting = False
            try:
                while True:
                    self._raise_if_failed()
                    if self._stopping:
                        raise JournalError("journal is closed")
                    run = self._running
                    if run is not None and run.locked:
                        self._cond.wait()
                        continue
                    extra = 2 if run is None else 0
                    fits_txn = run is None or run.reserved + credits <= self.max_targets
                    fits_log = self._used + self._reserved + credits + extra <= self.area
                    if fits_txn and fits_log:
                        break
                    if run is not None and not fits_txn:
                        run.locked = True
                    if not waiting:
                        self._space_waiters += 1
                        waiting = True
                    self._cond.notify_all()
                    self._cond.wait()
            finally:
                if waiting:
                    self._space_waiters -= 1

            if run is None:
                run = _Transaction(tid=next(self._tids))
                self._running = run
                self._reserved += 2
            run.handles += 1
            run.reserved += credits
            self._reserved += credits
            return TransactionHandle(self, run, credits)

    def journal_write(self, h: TransactionHandle, bh: BufferHead) -> None:
        """Capture bh's block number and current bytes in h's transaction."""
        if h.closed:
            raise HandleClosed("journal_write on a closed handle")
        if not bh.writable or bh.released:
            raise JournalError(f"block {bh.blockno} needs a live writable lease")
        bh.mark_dirty()
        data = bytes(bh.data)
        if bh.blockno not in h._captured:
            if h.used >= h.credits:
                raise CreditOverflow(f"handle used all {h.credits} credits")
            h._captured.add(bh.blockno)
            h.used += 1

        if not self.enabled:
            self.dev._write_image(bh.blockno, data)
            self.dev.flush()
            self.dev.cache.mark_clean(bh.blockno, data)
            return

        with self._cond:
            txn = h._txn
            if bh.blockno not in txn.blocks:
                self.dev.cache.pin(bh.blockno)
            txn.blocks[bh.blockno] = data
            if txn.first_capture is None:
                txn.first_capture = time.monotonic()

    def discard(self, h: TransactionHandle, blocknos: Iterable[int]) -> None:
        """
        Declare blocks freed by h's operation: their uncommitted contents
        are dropped now, and older committed copies are skipped at
        checkpoint once h's transaction commits.
        """
        if h.closed:
            raise HandleClosed("discard on a closed handle")
        if not self.enabled:
            return
        with self._cond:
            txn = h._txn
            for blockno in blocknos:
                if txn.blocks.pop(blockno, None) is not None:
                    self.dev.cache.unpin(blockno)
                txn.discards.add(blockno)
                if not self._held(blockno):
                    self.dev.cache.drop(blockno)

    def _held(self, blockno: int) -> bool:
        for txn in (self._running, self._committing):
            if txn is not None and blockno in txn.blocks:
                return True
        return any(blockno in rec.home for rec in self._records)

    def end_op(self, h: TransactionHandle) -> None:
        """Detach h; its transaction commits once every handle has ended."""
        if h.closed:
            return
        h.closed = True
        if not self.enabled:
            return
        with self._cond:
            txn = h._txn
            txn.handles -= 1
            unused = h.credits - h.used
            txn.reserved -= unused
            self._reserved -= unused
            if len(txn.blocks) >= self.area // 4:
                txn.locked = True
            self._cond.notify_all()

    # ------------------------------------------------------------------
    # Synchronous entry points
    # ------------------------------------------------------------------

    def force_commit(self) -> int:
        """
        Wait until every transaction that exists now is durably committed.

        Returns:
            The last committed sequence number
        """
        if not self.enabled:
            self.dev.flush()
            return self.sequence - 1
        with self._cond:
            self._raise_if_failed()
            run = self._running
            if run is not None:
                target = run.tid
            elif self._committing is not None:
                target = self._committing.tid
            else:
                return self.sequence - 1
            self._force_tid = max(self._force_tid, target)
            self._cond.notify_all()
            while self._done_tid < target:
                self._raise_if_failed()
                self._cond.wait()
            return self.sequence - 1

    def checkpoint(self) -> int:
        """Write every committed record home and empty the log. Returns records checkpointed."""
        if not self.enabled:
            return 0
        with self._cond:
            before = self.checkpoints
            self._checkpoint_all = True
            self._cond.notify_all()
            while self._records or self._committing is not None:
                self._raise_if_failed()
                self._cond.wait()
            self._checkpoint_all = False
            return self.checkpoints - before

    @property
    def live_log_blocks(self) -> int:
        with self._cond:
            return self._used

    @property
    def pending(self) -> bool:
        with self._cond:
            return self._running is not None or self._committing is not None

    def _raise_if_failed(self) -> None:
        if self._failed is not None:
            raise JournalError(f"journal aborted: {self._failed}")

    # ------------------------------------------------------------------
    # Committer
    # ------------------------------------------------------------------

    def _committer(self) -> None:
        while True:
            with self._cond:
                while True:
                    action = self._next_action()
                    if action is not None:
                        break
                    if self._stopping and self._running is None and not self._records:
                        return
                    self._cond.wait(self._timer_timeout())
            try:
                action()
            except BaseException as e:
                logger.exception("journal committer failed")
                with self._cond:
                    self._failed = e
                    self._cond.notify_all()
                return

    def _timer_timeout(self) -> Optional[float]:
        run = self._running
        if self.commit_interval is None or run is None or run.first_capture is None:
            return None
        return max(0.0, run.first_capture + self.commit_interval - time.monotonic())

    def _next_action(self):
        run = self._running
        if run is not None and not run.locked:
            if self._force_tid >= run.tid or self._stopping or self._checkpoint_all:
                run.locked = True
            elif self._space_waiters and (not self._records or self._discard_pending(self._records[0])):
                run.locked = True
            elif (
                self.commit_interval is not None
                and run.first_capture is not None
                and time.monotonic() - run.first_capture >= self.commit_interval
            ):
                run.locked = True
        if run is not None and run.locked and run.handles == 0:
            self._running = None
            self._committing = run
            return lambda: self._commit(run)
        if self._records and (self._space_waiters or self._checkpoint_all):
            if not self._discard_pending(self._records[0]):
                return self._checkpoint_oldest
        return None

    def _discard_pending(self, rec: _Record) -> bool:
        """True when an uncommitted transaction frees a block rec would write home."""
        for txn in (self._running, self._committing):
            if txn is not None and not txn.discards.isdisjoint(rec.home):
                return True
        return False

    def _commit(self, txn: _Transaction) -> None:
        targets = list(txn.blocks)
        datas = [txn.blocks[b] for b in targets]
        count = len(targets)
        seq = None
        offset = self._head
        if count:
            bsize = self.dev.block_size
            seq = self.sequence
            desc = bytearray(bsize)
            _HEADER.pack_into(desc, 0, JOURNAL_MAGIC, seq, count)
            struct.pack_into(f"<{count}I", desc, _HEADER.size, *targets)
            desc = bytes(desc)
            self.dev.write_block(self._log_block(offset), desc)
            for i, data in enumerate(datas):
                self.dev.write_block(self._log_block(offset + 1 + i), data)
            self.dev.flush()
            commit = bytearray(bsize)
            struct.pack_into("<II", commit, 0, JOURNAL_MAGIC, seq)
            struct.pack_into("<I", commit, bsize - 4, fnv1a32(desc, *datas))
            self.dev.write_block(self._log_block(offset + 1 + count), bytes(commit))
            self.dev.flush()
            logger.debug("committed journal record %d (%d blocks)", seq, count)

        with self._cond:
            if count:
                self._records.append(_Record(txn.tid, seq, offset, count + 2, dict(txn.blocks)))
                self._used += count + 2
                self._head = (offset + count + 2) % self.area
                self.sequence = seq + 1
                self.commits += 1
            for blockno in txn.discards:
                for rec in self._records:
                    if rec.tid != txn.tid and rec.home.pop(blockno, None) is not None:
                        self.dev.cache.unpin(blockno)
                if not self._held(blockno) and blockno not in txn.blocks:
                    self.dev.cache.drop(blockno)
            self._reserved -= txn.reserved + 2
            self._committing = None
            self._done_tid = txn.tid
            self._cond.notify_all()

    def _checkpoint_oldest(self) -> None:
        with self._cond:
            rec = self._records[0]
            home = dict(rec.home)
        for blockno, data in sorted(home.items()):
            self.dev.write_block(blockno, data)
        self.dev.flush()
        with self._cond:
            self._records.popleft()
            self._used -= rec.nblocks
            if self._records:
                tail_seq, tail_offset = self._records[0].seq, self._records[0].offset
            else:
                tail_seq, tail_offset = self.sequence, self._head
        self._write_super(tail_seq, tail_offset)
        self.dev.flush()
        with self._cond:
            for blockno in rec.home:
                self.dev.cache.unpin(blockno)
            self.checkpoints += 1
            self._cond.notify_all()
        logger.debug("checkpointed journal record %d", rec.seq)


def journal_init(
    dev: BlockDevice,
    start: int,
    length: int,
    commit_interval_ms: Optional[int] = settings.COMMIT_INTERVAL_MS,
    enabled: bool = True,
) -> Journal:
    """
    Open the journal in [start, start + length), recovering it first if it
    holds committed records, and start the committer.

    Raises:
        RegionTooSmall: If length < 8
    """
    journal = Journal(dev, start, length, commit_interval_ms, enabled)
    if journal._read_super() is None:
        logger.info("no journal superblock at block %d; formatting region", start)
        journal.format()
    else:
        journal.recover()
    if enabled:
        journal.start_committer()
    return journal
