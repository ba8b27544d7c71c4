"""
Line-based workload scripts and the runner that replays them through the
File Operations API.

One step per line, `#` starts a comment:

    [Tn] PID OP ARGS...

Steps carrying a thread annotation `Tn` (or `[Tn]`) that appear next to
each other form one concurrent phase: every distinct thread runs its own
steps in order, all threads at once. Unannotated steps run alone, in
order, between phases.

Handles are named by the path that opened them and belong to the PID
that opened them: `create` and `open` make one, `close` ends it, and
`read`, `write` and `fsync` need one.
"""

import errno
import logging
import os
import re
import shlex
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Optional, Union

from app.api.fsapi import Connection
from app.core.errors import errno_name
from app.filesystems.bento_fs import RENAME_NOREPLACE
from app.filesystems.layout import ROOT_INO
from app.models.schemas import (
    AttrReply,
    CreateArgs,
    CreatedReply,
    DataReply,
    DirEntriesReply,
    EntryReply,
    ErrReply,
    FsReply,
    FsyncArgs,
    FsyncdirArgs,
    GetattrArgs,
    LinkArgs,
    LookupArgs,
    MkdirArgs,
    MknodArgs,
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
    RmdirArgs,
    SetattrArgs,
    SymlinkArgs,
    UnlinkArgs,
    WriteArgs,
    WrittenReply,
)

logger = logging.getLogger(__name__)

_THREAD = re.compile(r"^\[?T(\d+)\]?$")
_PATTERN = b"0123456789abcdef"
DEFAULT_READ_SIZE = 1 << 16

# op -> (min args, max args)
ARITY = {
    "mkdir": (1, 2),
    "rmdir": (1, 1),
    "create": (1, 2),
    "mknod": (1, 2),
    "open": (1, 2),
    "close": (1, 1),
    "read": (1, 3),
    "write": (2, 3),
    "fsync": (1, 1),
    "unlink": (1, 1),
    "rename": (2, 3),
    "link": (2, 2),
    "symlink": (2, 2),
    "readlink": (1, 1),
    "truncate": (2, 2),
    "stat": (1, 1),
    "readdir": (1, 1),
    "sync": (0, 0),
}
OPENS = {"create", "open"}
NEEDS_HANDLE = {"close", "read", "write", "fsync"}
_OPEN_MODES = {"r": os.O_RDONLY, "w": os.O_WRONLY, "rw": os.O_RDWR}


class WorkloadError(Exception):
    """Base exception for workload scripts."""
    pass


class ScriptError(WorkloadError):
    """The script does not parse or uses a handle it never opened."""

    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


class StepFailed(WorkloadError):
    """A step got an error reply while running in strict mode."""

    def __init__(self, step: "Step", errno_: int):
        self.step = step
        self.errno = errno_
        super().__init__(f"line {step.lineno}: {step.op} failed with {errno_name(errno_)}")


@dataclass(frozen=True)
class Step:
    lineno: int
    pid: int
    op: str
    args: tuple[str, ...] = ()
    thread: Optional[int] = None

    def to_line(self) -> str:
        head = f"T{self.thread} " if self.thread is not None else ""
        return f"{head}{self.pid} {self.op} {' '.join(shlex.quote(a) for a in self.args)}".rstrip()


@dataclass
class WorkloadScript:
    steps: list[Step] = field(default_factory=list)

    def phases(self) -> list[list[list[Step]]]:
        """Phases in order; each phase is a list of per-thread step lists."""
        out = []
        for threaded, run in groupby(self.steps, key=lambda s: s.thread is not None):
            run = list(run)
            if not threaded:
                out.extend([[step]] for step in run)
                continue
            by_thread: dict[int, list[Step]] = {}
            for step in run:
                by_thread.setdefault(step.thread, []).append(step)
            out.append(list(by_thread.values()))
        return out

    @property
    def threads(self) -> int:
        return len({s.thread for s in self.steps if s.thread is not None}) or 1

    def to_text(self) -> str:
        return "".join(step.to_line() + "\n" for step in self.steps)


def parse_script(text: str) -> WorkloadScript:
    """
    Parse and validate a workload script.

    Raises:
        ScriptError: On a malformed line, an unknown op, a wrong argument
            count, or a handle used before it was opened
    """
    steps = []
    handles: set[tuple[int, str]] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(line, comments=True)
        except ValueError as e:
            raise ScriptError(lineno, str(e))
        if not tokens:
            continue
        thread = None
        match = _THREAD.match(tokens[0])
        if match:
            thread = int(match.group(1))
            tokens = tokens[1:]
        if len(tokens) < 2:
            raise ScriptError(lineno, "expected PID OP ARGS...")
        try:
            pid = int(tokens[0])
        except ValueError:
            raise ScriptError(lineno, f"PID {tokens[0]!r} is not a number")
        op, args = tokens[1].lower(), tuple(tokens[2:])
        if op not in ARITY:
            raise ScriptError(lineno, f"unknown op {op!r}")
        lo, hi = ARITY[op]
        if not lo <= len(args) <= hi:
            raise ScriptError(lineno, f"{op} takes {lo}..{hi} arguments, got {len(args)}")
        if op == "open" and len(args) > 1 and args[1] not in _OPEN_MODES:
            raise ScriptError(lineno, f"open mode must be one of {sorted(_OPEN_MODES)}")
        if op in NEEDS_HANDLE and (pid, args[0]) not in handles:
            raise ScriptError(lineno, f"{op} uses handle {args[0]!r} that pid {pid} never opened")
        if op in OPENS:
            handles.add((pid, args[0]))
        elif op == "close":
            handles.discard((pid, args[0]))
        steps.append(Step(lineno, pid, op, args, thread))
    return WorkloadScript(steps)


def load_script(path: Union[str, Path]) -> WorkloadScript:
    return parse_script(Path(path).read_text())


def payload(spec: str) -> bytes:
    """Literal text, or `@N` for N pattern bytes, or `@N:c` for N copies of c."""
    if not spec.startswith("@"):
        return spec.encode("utf-8", "surrogateescape")
    size, _, fill = spec[1:].partition(":")
    count = int(size)
    if fill:
        return fill.encode()[:1] * count
    return (_PATTERN * (count // len(_PATTERN) + 1))[:count]


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    step: Step
    reply: FsReply

    @property
    def ok(self) -> bool:
        return not isinstance(self.reply, ErrReply)


class WorkloadRunner:
    """Executes workload steps against one connection."""

    def __init__(self, conn: Connection, strict: bool = False):
        self.conn = conn
        self.strict = strict
        self._handles: dict[tuple[int, str], tuple[int, int]] = {}
        self._lock = threading.Lock()

    def run(self, script: WorkloadScript) -> list[StepResult]:
        """
        Run every phase; results come back in script order.

        Raises:
            StepFailed: In strict mode, for the first failing step
        """
        results: list[StepResult] = []
        for phase in script.phases():
            if len(phase) == 1:
                done = self._run_thread(phase[0])
            else:
                done = []
                with ThreadPoolExecutor(max_workers=len(phase), thread_name_prefix="workload") as pool:
                    for future in [pool.submit(self._run_thread, steps) for steps in phase]:
                        done.extend(future.result())
            done.sort(key=lambda r: r.step.lineno)
            results.extend(done)
            if self.strict:
                failed = next((r for r in done if not r.ok), None)
                if failed is not None:
                    raise StepFailed(failed.step, failed.reply.errno)
        return results

    def _run_thread(self, steps: list[Step]) -> list[StepResult]:
        out = []
        for step in steps:
            result = StepResult(step, self.execute(step))
            out.append(result)
            if not result.ok:
                logger.debug("line %d %s -> %s", step.lineno, step.op, errno_name(result.reply.errno))
                if self.strict:
                    break
        return out

    # ------------------------------------------------------------------

    def _req(self, step: Step, args) -> FsReply:
        return self.conn.request(args, pid=step.pid)

    def resolve(self, path: str, pid: int = 0) -> Union[int, ErrReply]:
        """Inode number of an absolute path, walking lookups from the root."""
        ino = ROOT_INO
        for part in (p for p in path.split("/") if p):
            reply = self.conn.request(LookupArgs(parent=ino, name=part), pid=pid)
            if isinstance(reply, ErrReply):
                return reply
            ino = reply.ino
        return ino

    def _parent(self, path: str, pid: int) -> Union[tuple[int, str], ErrReply]:
        head, _, name = path.rstrip("/").rpartition("/")
        if not name:
            return ErrReply(errno=errno.EINVAL)
        parent = self.resolve(head, pid)
        if isinstance(parent, ErrReply):
            return parent
        return parent, name

    def _handle(self, step: Step) -> Union[tuple[int, int], ErrReply]:
        with self._lock:
            handle = self._handles.get((step.pid, step.args[0]))
        return handle if handle is not None else ErrReply(errno=errno.EBADF)

    def execute(self, step: Step) -> FsReply:
        op, a = step.op, step.args
        if op == "sync":
            return self._sync(step)

        if op in ("mkdir", "create", "mknod", "symlink"):
            where = self._parent(a[1] if op == "symlink" else a[0], step.pid)
            if isinstance(where, ErrReply):
                return where
            parent, name = where
            if op == "mkdir":
                return self._req(step, MkdirArgs(parent=parent, name=name, mode=int(a[1], 8) if len(a) > 1 else 0o755))
            if op == "mknod":
                return self._req(step, MknodArgs(parent=parent, name=name, mode=int(a[1], 8) if len(a) > 1 else 0o644))
            if op == "symlink":
                return self._req(step, SymlinkArgs(parent=parent, name=name, link=a[0]))
            reply = self._req(step, CreateArgs(
                parent=parent, name=name, mode=int(a[1], 8) if len(a) > 1 else 0o644, flags=os.O_RDWR,
            ))
            if isinstance(reply, CreatedReply):
                with self._lock:
                    self._handles[(step.pid, a[0])] = (reply.ino, reply.fh)
            return reply

        if op in ("unlink", "rmdir"):
            where = self._parent(a[0], step.pid)
            if isinstance(where, ErrReply):
                return where
            parent, name = where
            cls = UnlinkArgs if op == "unlink" else RmdirArgs
            return self._req(step, cls(parent=parent, name=name))

        if op in ("rename", "link"):
            dst = self._parent(a[1], step.pid)
            if isinstance(dst, ErrReply):
                return dst
            newparent, newname = dst
            if op == "link":
                ino = self.resolve(a[0], step.pid)
                if isinstance(ino, ErrReply):
                    return ino
                return self._req(step, LinkArgs(ino=ino, newparent=newparent, newname=newname))
            src = self._parent(a[0], step.pid)
            if isinstance(src, ErrReply):
                return src
            flags = RENAME_NOREPLACE if len(a) > 2 and a[2] == "noreplace" else 0
            return self._req(step, RenameArgs(
                parent=src[0], name=src[1], newparent=newparent, newname=newname, flags=flags,
            ))

        if op in NEEDS_HANDLE:
            handle = self._handle(step)
            if isinstance(handle, ErrReply):
                return handle
            ino, fh = handle
            if op == "close":
                reply = self._req(step, ReleaseArgs(ino=ino, fh=fh))
                with self._lock:
                    self._handles.pop((step.pid, a[0]), None)
                return reply
            if op == "fsync":
                return self._req(step, FsyncArgs(ino=ino, fh=fh))
            if op == "read":
                size = int(a[1]) if len(a) > 1 else DEFAULT_READ_SIZE
                offset = int(a[2]) if len(a) > 2 else 0
                return self._req(step, ReadArgs(ino=ino, fh=fh, offset=offset, size=size))
            offset = 0
            if len(a) > 2:
                if a[2] == "end":
                    attr = self._req(step, GetattrArgs(ino=ino, fh=fh))
                    if isinstance(attr, ErrReply):
                        return attr
                    offset = attr.attr.size
                else:
                    offset = int(a[2])
            return self._req(step, WriteArgs(ino=ino, fh=fh, offset=offset, data=payload(a[1])))

        ino = self.resolve(a[0], step.pid)
        if isinstance(ino, ErrReply):
            return ino
        if op == "open":
            flags = _OPEN_MODES[a[1] if len(a) > 1 else "rw"]
            reply = self._req(step, OpenArgs(ino=ino, flags=flags))
            if isinstance(reply, OpenReply):
                with self._lock:
                    self._handles[(step.pid, a[0])] = (ino, reply.fh)
            return reply
        if op == "readlink":
            return self._req(step, ReadlinkArgs(ino=ino))
        if op == "truncate":
            return self._req(step, SetattrArgs(ino=ino, size=int(a[1])))
        if op == "stat":
            return self._req(step, GetattrArgs(ino=ino))
        return self._readdir(step, ino)

    def _readdir(self, step: Step, ino: int) -> FsReply:
        opened = self._req(step, OpendirArgs(ino=ino))
        if isinstance(opened, ErrReply):
            return opened
        listing = DirEntriesReply()
        offset = 0
        try:
            while True:
                reply = self._req(step, ReaddirArgs(ino=ino, fh=opened.fh, offset=offset))
                if isinstance(reply, ErrReply):
                    return reply
                if not reply.entries:
                    return listing
                listing.entries.extend(reply.entries)
                offset = reply.entries[-1].next_offset
        finally:
            self._req(step, ReleasedirArgs(ino=ino, fh=opened.fh))

    def _sync(self, step: Step) -> FsReply:
        opened = self._req(step, OpendirArgs(ino=ROOT_INO))
        if isinstance(opened, ErrReply):
            return opened
        try:
            return self._req(step, FsyncdirArgs(ino=ROOT_INO, fh=opened.fh))
        finally:
            self._req(step, ReleasedirArgs(ino=ROOT_INO, fh=opened.fh))

    def close_all(self) -> None:
        """Release every handle the script left open."""
        with self._lock:
            leftover = list(self._handles.items())
            self._handles.clear()
        for (pid, _), (ino, fh) in leftover:
            self.conn.request(ReleaseArgs(ino=ino, fh=fh), pid=pid)


def format_result(result: StepResult) -> str:
    """One machine-readable line per step: LINENO OP VARIANT DETAIL."""
    reply = result.reply
    head = f"{result.step.lineno} {result.step.op}"
    if isinstance(reply, ErrReply):
        return f"{head} err {errno_name(reply.errno)}"
    if isinstance(reply, DataReply):
        return f"{head} data {reply.data.decode('utf-8', 'backslashreplace')!r}"
    if isinstance(reply, WrittenReply):
        return f"{head} written {reply.count}"
    if isinstance(reply, CreatedReply):
        return f"{head} created ino={reply.ino} fh={reply.fh}"
    if isinstance(reply, EntryReply):
        return f"{head} entry ino={reply.ino}"
    if isinstance(reply, OpenReply):
        return f"{head} open fh={reply.fh}"
    if isinstance(reply, AttrReply):
        a = reply.attr
        return f"{head} attr ino={a.ino} kind={a.kind.value} size={a.size} nlink={a.nlink}"
    if isinstance(reply, DirEntriesReply):
        return f"{head} entries {','.join(e.name for e in reply.entries)}"
    if isinstance(reply, OkReply):
        return f"{head} ok"
    return f"{head} {reply.variant}"
