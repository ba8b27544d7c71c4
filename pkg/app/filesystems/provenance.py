"""
Provenance log codec, parser and dependency inference.

The log is an append-only file of length-prefixed binary records, each
closed by an FNV-1a checksum:

    u32 length, u64 seq, u8 kind, u8 rw_mode, u8 deleted, pad,
    u32 pid, ino, parent, newparent, flags, fh,
    u16 name_len, u16 newname_len, name, newname, u32 checksum
"""

import logging
import os
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

from app.models.schemas import ProvenanceRecord, ProvKind, RwMode
from app.services.journal import fnv1a32

logger = logging.getLogger(__name__)

_HEAD = struct.Struct("<IQBBBxIIIIIIHH")
_SUM = struct.Struct("<I")
MAX_RECORD_SIZE = _HEAD.size + 2 * 255 + _SUM.size

_KIND_CODES = {kind: code for code, kind in enumerate(ProvKind, start=1)}
_CODE_KINDS = {code: kind for kind, code in _KIND_CODES.items()}
_MODE_CODES = {None: 0, RwMode.READ: 1, RwMode.WRITE: 2, RwMode.READ_WRITE: 3}
_CODE_MODES = {code: mode for mode, code in _MODE_CODES.items()}

# Handle numbers carry a mount epoch in their high bits; every mount of a
# logging instance starts numbering at the next epoch.
FH_EPOCH_BITS = 20
FH_LIMIT = 1 << 32


def fh_epoch(fh: int) -> int:
    return fh >> FH_EPOCH_BITS


def next_epoch_fh(highest_fh: int) -> int:
    """First handle number of the epoch after the one holding highest_fh."""
    return (fh_epoch(highest_fh) + 1) << FH_EPOCH_BITS


class ProvenanceError(Exception):
    """Base exception for provenance log failures."""
    pass


class CorruptRecord(ProvenanceError):
    """A record before the end of the log fails to decode."""

    def __init__(self, offset: int, reason: str):
        self.offset = offset
        super().__init__(f"corrupt provenance record at byte {offset}: {reason}")


def rw_mode_for(flags: int) -> RwMode:
    """Access mode of an open() flag word."""
    access = flags & os.O_ACCMODE
    if access == os.O_WRONLY:
        return RwMode.WRITE
    if access == os.O_RDWR:
        return RwMode.READ_WRITE
    return RwMode.READ


def encode_record(record: ProvenanceRecord) -> bytes:
    """Binary form of one record, checksum included."""
    name = record.name.encode("utf-8", "surrogateescape")
    newname = record.newname.encode("utf-8", "surrogateescape")
    length = _HEAD.size + len(name) + len(newname) + _SUM.size
    body = _HEAD.pack(
        length, record.seq, _KIND_CODES[record.kind], _MODE_CODES[record.rw_mode], int(record.deleted),
        record.pid, record.ino, record.parent, record.newparent, record.flags & 0xFFFFFFFF, record.fh,
        len(name), len(newname),
    ) + name + newname
    return body + _SUM.pack(fnv1a32(body))


@dataclass
class ParsedLog:
    """Records recovered from a log, plus how many torn tail records were dropped."""

    records: list[ProvenanceRecord] = field(default_factory=list)
    warnings: int = 0


def prov_parse(data: bytes) -> ParsedLog:
    """
    Decode a provenance log.

    A record cut off or damaged at the very end of the log (an append torn
    by a crash) is dropped and counted in `warnings`; damage anywhere else
    raises.

    Raises:
        CorruptRecord: If a record before the tail is malformed or out of order
    """
    parsed = ParsedLog()
    pos = 0
    last_seq = 0
    while pos < len(data):
        remaining = len(data) - pos
        if remaining < _HEAD.size:
            parsed.warnings += 1
            logger.warning("dropping %d trailing bytes of a torn provenance record", remaining)
            break
        (length, seq, kind_code, mode_code, deleted, pid, ino, parent, newparent, flags, fh,
         name_len, newname_len) = _HEAD.unpack_from(data, pos)
        end = pos + length
        if length != _HEAD.size + name_len + newname_len + _SUM.size:
            if end >= len(data) or length == 0:
                parsed.warnings += 1
                logger.warning("dropping torn provenance record at byte %d", pos)
                break
            raise CorruptRecord(pos, f"length {length} disagrees with name lengths")
        if end > len(data):
            parsed.warnings += 1
            logger.warning("dropping provenance record at byte %d cut off after %d bytes", pos, remaining)
            break
        body = data[pos:end - _SUM.size]
        (checksum,) = _SUM.unpack_from(data, end - _SUM.size)
        if checksum != fnv1a32(body):
            if end == len(data):
                parsed.warnings += 1
                logger.warning("dropping provenance record at byte %d with a bad checksum", pos)
                break
            raise CorruptRecord(pos, "checksum mismatch")
        if kind_code not in _CODE_KINDS or mode_code not in _CODE_MODES:
            raise CorruptRecord(pos, f"unknown kind {kind_code} or mode {mode_code}")
        if seq <= last_seq:
            raise CorruptRecord(pos, f"sequence {seq} does not follow {last_seq}")
        names = data[pos + _HEAD.size:end - _SUM.size]
        parsed.records.append(ProvenanceRecord(
            seq=seq,
            kind=_CODE_KINDS[kind_code],
            pid=pid,
            ino=ino,
            parent=parent,
            newparent=newparent,
            name=names[:name_len].decode("utf-8", "surrogateescape"),
            newname=names[name_len:].decode("utf-8", "surrogateescape"),
            flags=flags,
            rw_mode=_CODE_MODES[mode_code],
            deleted=bool(deleted),
            fh=fh,
        ))
        last_seq = seq
        pos = end
    return parsed


def format_record(record: ProvenanceRecord) -> str:
    """One provdump line: SEQ KIND PID INO [PARENT NAME] [NEWPARENT NEWNAME] [MODE] [DELETED]."""
    parts = [str(record.seq), record.kind.value, str(record.pid), str(record.ino)]
    if record.kind in (ProvKind.CREATE, ProvKind.SYMLINK, ProvKind.UNLINK, ProvKind.RENAME):
        parts += [str(record.parent), record.name]
    if record.kind == ProvKind.RENAME:
        parts += [str(record.newparent), record.newname]
    if record.kind == ProvKind.SYMLINK:
        parts.append(record.newname)
    if record.rw_mode is not None:
        parts.append(record.rw_mode.value)
    if record.kind == ProvKind.UNLINK:
        parts.append("deleted" if record.deleted else "kept")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DependencyEdge:
    """The writer file's contents may depend on the reader file's."""

    reader: int
    writer: int
    pid: int
    start_seq: int
    end_seq: Optional[int]

    def to_line(self) -> str:
        return f"{self.reader} -> {self.writer} ({self.pid})"


@dataclass
class DependencyGraph:
    nodes: set[int] = field(default_factory=set)
    edges: list[DependencyEdge] = field(default_factory=list)
    unmatched_closes: list[ProvenanceRecord] = field(default_factory=list)

    def pairs(self) -> set[tuple[int, int]]:
        return {(e.reader, e.writer) for e in self.edges}

    def closure(self) -> set[tuple[int, int]]:
        """Transitive closure of the reader -> writer relation."""
        succ: dict[int, set[int]] = defaultdict(set)
        for reader, writer in self.pairs():
            succ[reader].add(writer)
        reach = set()
        for start in list(succ):
            stack = list(succ[start])
            seen: set[int] = set()
            while stack:
                node = stack.pop()
                if node in seen:
                    continue
                seen.add(node)
                reach.add((start, node))
                stack.extend(succ.get(node, ()))
        return reach


@dataclass
class _Interval:
    ino: int
    mode: RwMode
    start: int
    end: Optional[int] = None

    def overlaps(self, other: "_Interval") -> bool:
        self_end = self.end if self.end is not None else float("inf")
        other_end = other.end if other.end is not None else float("inf")
        return self.start <= other_end and other.start <= self_end


def prov_infer(records: Iterable[ProvenanceRecord]) -> DependencyGraph:
    """
    Build reader -> writer edges: one per file R a process held open
    readable while it held a different file W open writable.

    Open intervals run from an Open record to the Close carrying the same
    pid and fh. An Open from a later handle epoch means the file system was
    mounted again, so every interval still open ends at the record before
    it. Intervals still open at the end of the log stay open.
    """
    graph = DependencyGraph()
    intervals: dict[int, list[_Interval]] = defaultdict(list)
    live: dict[tuple[int, int], _Interval] = {}
    epoch = 0
    last_seq = 0

    for record in records:
        if record.kind == ProvKind.OPEN and fh_epoch(record.fh) > epoch:
            if live:
                logger.debug("handle epoch %d begins at seq %d; ending %d open intervals",
                             fh_epoch(record.fh), record.seq, len(live))
            for interval in live.values():
                interval.end = last_seq
            live.clear()
            epoch = fh_epoch(record.fh)
        last_seq = record.seq
        if record.kind == ProvKind.OPEN:
            interval = _Interval(record.ino, record.rw_mode or RwMode.READ, record.seq)
            live[(record.pid, record.fh)] = interval
            intervals[record.pid].append(interval)
            graph.nodes.add(record.ino)
        elif record.kind == ProvKind.CLOSE:
            interval = live.pop((record.pid, record.fh), None)
            if interval is None or interval.ino != record.ino:
                logger.warning("close of fh %d by pid %d has no matching open", record.fh, record.pid)
                graph.unmatched_closes.append(record)
                continue
            interval.end = record.seq

    seen: set[tuple[int, int, int]] = set()
    for pid, spans in intervals.items():
        for read in spans:
            if not read.mode.readable:
                continue
            for write in spans:
                if not write.mode.writable or write.ino == read.ino or not read.overlaps(write):
                    continue
                key = (read.ino, write.ino, pid)
                if key in seen:
                    continue
                seen.add(key)
                ends = [e for e in (read.end, write.end) if e is not None]
                graph.edges.append(DependencyEdge(
                    reader=read.ino,
                    writer=write.ino,
                    pid=pid,
                    start_seq=max(read.start, write.start),
                    end_seq=min(ends) if ends else None,
                ))
    graph.edges.sort(key=lambda e: (e.start_seq, e.reader, e.writer, e.pid))
    return graph
