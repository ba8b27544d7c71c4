"""
Exhaustive two-operation crash-consistency tester.

Every workload is a fixed setup followed by two operations drawn from a
small universe, optionally with an fsync barrier between them. Each one is
run once on a memory image with the device trace recording and crash
injection armed. Then every crash state is rebuilt from the trace, mounted
(which recovers the journal), compared against the namespaces observed
between operations, unmounted and checked with fsck.

Crash model: writes between two flushes may be lost or reordered, so the
crash states are the trace prefixes ending at each flush. Stress mode adds
one state per write, keeping a seeded random subset of the writes issued
since the last flush.
"""

import hashlib
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterable, Optional, Union

from app.api.fsapi import Connection
from app.core.errors import errno_name
from app.filesystems.layout import ROOT_INO
from app.harness.fsck import fsck, format_violation
from app.harness.session import format_memory_image, mounted
from app.harness.workload import Step, WorkloadError, WorkloadRunner, parse_script
from app.models.schemas import (
    CrashFailure,
    CrashTestSummary,
    DataReply,
    DirEntriesReply,
    ErrReply,
    FileKind,
    LookupArgs,
    MountOptions,
    OpenArgs,
    OpendirArgs,
    ReadArgs,
    ReaddirArgs,
    ReadlinkArgs,
    ReleaseArgs,
    ReleasedirArgs,
)
from app.services.blockdev import BlockDevice, TraceEvent

logger = logging.getLogger(__name__)

DIRECTORIES = ("/A", "/B")
PATHS = ("/A/foo", "/A/bar", "/B/baz")
PATTERNS = ("@100:a", "@6000:b")
SYMLINK_TARGET = "t"
OPSET = ("create", "mkdir", "unlink", "rmdir", "symlink", "write", "truncate", "rename", "link")

SETUP = """\
0 mkdir /A
0 mkdir /B
0 create /A/foo
0 write /A/foo @100:z
0 close /A/foo
"""

# op -> script steps, with {p} and {q} standing for paths and {d} for data
_OP_STEPS = {
    "create": ("create {p}", "close {p}"),
    "mkdir": ("mkdir {p}",),
    "unlink": ("unlink {p}",),
    "rmdir": ("rmdir {p}",),
    "symlink": (f"symlink {SYMLINK_TARGET} {{p}}",),
    "write": ("open {p} w", "write {p} {d}", "close {p}"),
    "truncate": ("truncate {p} 10",),
    "rename": ("rename {p} {q}",),
    "link": ("link {p} {q}",),
}
SYNC_STEP = "sync"


class CrashTestError(WorkloadError):
    """A workload could not be recorded or a crash state could not be observed."""
    pass


@dataclass(frozen=True)
class CrashOp:
    op: str
    args: tuple[str, ...]

    @property
    def label(self) -> str:
        return " ".join((self.op, *self.args))

    def lines(self) -> list[str]:
        p = self.args[0]
        q = self.args[1] if self.op in ("rename", "link") else ""
        d = self.args[1] if self.op == "write" else ""
        return [f"0 {template.format(p=p, q=q, d=d)}" for template in _OP_STEPS[self.op]]


@dataclass(frozen=True)
class CrashWorkload:
    ops: tuple[CrashOp, ...]
    fsync: bool = False

    @property
    def name(self) -> str:
        labels = [op.label for op in self.ops]
        if self.fsync:
            labels.insert(1, SYNC_STEP)
        return " | ".join(labels)

    @classmethod
    def from_name(cls, name: str) -> "CrashWorkload":
        ops = []
        fsync = False
        for part in name.split(" | "):
            tokens = part.split()
            if tokens == [SYNC_STEP]:
                fsync = True
                continue
            if not tokens or tokens[0] not in _OP_STEPS:
                raise CrashTestError(f"bad workload name {name!r}")
            ops.append(CrashOp(tokens[0], tuple(tokens[1:])))
        return cls(tuple(ops), fsync)

    def script(self) -> str:
        lines = []
        for i, op in enumerate(self.ops):
            lines.extend(op.lines())
            if self.fsync and i == 0:
                lines.append(f"0 {SYNC_STEP}")
        return "".join(line + "\n" for line in lines)


def op_universe(opset: Iterable[str] = OPSET) -> list[CrashOp]:
    """Every operation over the path and pattern universe, for the chosen op names."""
    ops = []
    for name in opset:
        if name not in _OP_STEPS:
            raise CrashTestError(f"unknown op {name!r}; choose from {', '.join(OPSET)}")
        if name == "write":
            ops.extend(CrashOp(name, (p, d)) for p in PATHS for d in PATTERNS)
        elif name in ("rename", "link"):
            ops.extend(CrashOp(name, (p, q)) for p in PATHS for q in PATHS if p != q)
        else:
            ops.extend(CrashOp(name, (p,)) for p in PATHS)
    return ops


def seq2_workloads(opset: Iterable[str] = OPSET) -> list[CrashWorkload]:
    """All ordered pairs of operations, each with and without an fsync between them."""
    ops = op_universe(opset)
    return [CrashWorkload((a, b), fsync) for a, b in product(ops, ops) for fsync in (False, True)]


# ---------------------------------------------------------------------------
# Observation
# ---------------------------------------------------------------------------


Namespace = dict[str, tuple]


def observe(conn: Connection) -> Namespace:
    """
    Namespace as the API shows it: path -> (kind, nlink, size, content digest or target).

    Raises:
        CrashTestError: If any request on the way fails
    """
    out: Namespace = {}

    def call(args):
        reply = conn.request(args)
        if isinstance(reply, ErrReply):
            raise CrashTestError(f"{args.opcode.value} failed with {errno_name(reply.errno)}")
        return reply

    def walk(ino: int, prefix: str) -> None:
        fh = call(OpendirArgs(ino=ino)).fh
        names = []
        offset = 0
        try:
            while True:
                reply: DirEntriesReply = call(ReaddirArgs(ino=ino, fh=fh, offset=offset))
                if not reply.entries:
                    break
                names.extend(e.name for e in reply.entries if e.name not in (".", ".."))
                offset = reply.entries[-1].next_offset
        finally:
            call(ReleasedirArgs(ino=ino, fh=fh))
        for name in sorted(names):
            entry = call(LookupArgs(parent=ino, name=name))
            attr = entry.attr
            path = f"{prefix}/{name}"
            if attr.kind == FileKind.DIRECTORY:
                out[path] = ("directory", attr.nlink)
                walk(entry.ino, path)
            elif attr.kind == FileKind.SYMLINK:
                out[path] = ("symlink", attr.nlink, call(ReadlinkArgs(ino=entry.ino)).data)
            else:
                handle = call(OpenArgs(ino=entry.ino)).fh
                try:
                    data: DataReply = call(ReadArgs(ino=entry.ino, fh=handle, offset=0, size=attr.size))
                finally:
                    call(ReleaseArgs(ino=entry.ino, fh=handle))
                digest = hashlib.blake2b(data.data, digest_size=8).hexdigest()
                out[path] = ("regular", attr.nlink, attr.size, digest)

    walk(ROOT_INO, "")
    return out


# ---------------------------------------------------------------------------
# Crash states
# ---------------------------------------------------------------------------


def crash_points(events: list[TraceEvent], stress: bool = False) -> list[int]:
    """Prefix lengths to crash at: after every flush, and in stress mode after every write."""
    return [i + 1 for i, e in enumerate(events) if e.kind == "F" or stress]


def crash_image(
    base: bytes,
    events: list[TraceEvent],
    point: int,
    block_size: int,
    rng: Optional[random.Random] = None,
) -> bytes:
    """
    Image after a crash once `point` trace events were issued.

    Writes up to the last flush inside the prefix always land. Without an
    rng so do the rest; with one, the last write lands and each earlier
    write since the flush lands with probability one half.
    """
    image = bytearray(base)
    prefix = events[:point]
    barrier = max((i for i, e in enumerate(prefix) if e.kind == "F"), default=-1)
    durable = [e for e in prefix[:barrier + 1] if e.kind == "W"]
    pending = [e for e in prefix[barrier + 1:] if e.kind == "W"]
    if rng is not None and pending:
        pending = [e for e in pending[:-1] if rng.random() < 0.5] + [pending[-1]]
    for event in durable + pending:
        offset = event.blockno * block_size
        image[offset:offset + block_size] = event.data
    return bytes(image)


# ---------------------------------------------------------------------------
# Tester
# ---------------------------------------------------------------------------


@dataclass
class CrashConfig:
    """
    Attributes:
        total_blocks: Blocks in the test image
        block_size: Block size of the test image
        variant: File-system variant under test
        journal_enabled: False runs the workloads unjournaled (tester self-test)
        stress: Also crash after every single write
        seed: Seed for workload sampling and stress-mode write subsets
        workers: Workloads checked in parallel
        artifacts: Directory for failing-case files; none written when unset
    """

    total_blocks: int = 256
    block_size: int = 1024
    variant: str = "bentofs"
    journal_enabled: bool = True
    stress: bool = False
    seed: int = 0
    workers: int = 4
    artifacts: Optional[Path] = None

    def options(self, journal_enabled: bool = True) -> MountOptions:
        return MountOptions(
            block_size=self.block_size,
            commit_interval_ms=None,
            journal_enabled=journal_enabled,
        )


@dataclass
class WorkloadOutcome:
    workload: CrashWorkload
    events: list[TraceEvent] = field(default_factory=list)
    cases: int = 0
    failures: list[CrashFailure] = field(default_factory=list)


class CrashTester:
    """Records workloads on a shared base image and checks every crash state."""

    def __init__(self, config: Optional[CrashConfig] = None):
        self.config = config or CrashConfig()
        self.base = self._build_base()

    def _build_base(self) -> bytes:
        cfg = self.config
        dev = BlockDevice.from_memory(format_memory_image(cfg.total_blocks, cfg.block_size), cfg.block_size)
        with mounted(dev, cfg.variant, cfg.options(), name="crash-setup") as conn:
            WorkloadRunner(conn, strict=True).run(parse_script(SETUP))
        return dev.snapshot()

    def record(self, workload: CrashWorkload) -> tuple[bytes, list[TraceEvent], list, list[tuple[int, int]]]:
        """
        Run a workload once with crash injection armed.

        Returns:
            (image before the workload, trace, namespaces between
            operations, durability marks as (trace length, operations durable))
        """
        cfg = self.config
        dev = BlockDevice.from_memory(self.base, cfg.block_size)
        marks: list[tuple[int, int]] = []
        with mounted(dev, cfg.variant, cfg.options(cfg.journal_enabled), name="crash-record") as conn:
            before = dev.snapshot()
            dev.arm_crash_injection()
            dev.trace.start()
            runner = WorkloadRunner(conn)
            states = [observe(conn)]
            for i, op in enumerate(workload.ops):
                for step in parse_script("\n".join(op.lines())).steps:
                    runner.execute(step)
                states.append(observe(conn))
                if workload.fsync and i == 0:
                    runner.execute(Step(0, 0, SYNC_STEP))
                    marks.append((len(dev.trace), 1))
            runner.close_all()
        events = dev.trace.stop()
        marks.append((len(events), len(workload.ops)))
        return before, events, states, marks

    def check(self, workload: CrashWorkload) -> WorkloadOutcome:
        """Record a workload and check every crash state it can leave behind."""
        cfg = self.config
        outcome = WorkloadOutcome(workload)
        try:
            before, events, states, marks = self.record(workload)
        except Exception as e:
            logger.exception("recording %s failed", workload.name)
            outcome.failures.append(CrashFailure(workload=workload.name, crash_point=0, reason=f"recording failed: {e}"))
            return outcome
        outcome.events = events
        rng = random.Random(f"{cfg.seed}:{workload.name}") if cfg.stress else None

        for point in crash_points(events, cfg.stress):
            outcome.cases += 1
            floor = max((ops for length, ops in marks if length <= point), default=0)
            image = crash_image(before, events, point, cfg.block_size, rng if events[point - 1].kind == "W" else None)
            reason = self._check_state(image, states, floor)
            if reason is None:
                continue
            failure = CrashFailure(workload=workload.name, crash_point=point, reason=reason)
            if cfg.artifacts is not None:
                failure.artifact = str(write_artifact(cfg.artifacts, workload, point, reason, events))
            logger.warning("crash case %s @%d failed: %s", workload.name, point, reason)
            outcome.failures.append(failure)
        return outcome

    def _check_state(self, image: bytes, states: list, floor: int) -> Optional[str]:
        cfg = self.config
        dev = BlockDevice.from_memory(image, cfg.block_size)
        try:
            with mounted(dev, cfg.variant, cfg.options(), name="crash-check") as conn:
                got = observe(conn)
        except Exception as e:
            return f"recovery failed: {e}"
        if got not in states[floor:]:
            seen = next((i for i, s in enumerate(states) if s == got), None)
            if seen is not None:
                return f"state after operation {seen} survived although {floor} operations were durable"
            return "recovered namespace matches no operation boundary"
        report = fsck(dev)
        if not report.clean:
            return "fsck: " + "; ".join(format_violation(v) for v in report.violations[:3])
        return None

    def run(self, workloads: list[CrashWorkload], budget: Optional[int] = None) -> CrashTestSummary:
        """
        Check workloads, at most `budget` of them (a seeded sample when fewer than all).

        Returns:
            Summary; summary.passed is True when no crash state failed
        """
        cfg = self.config
        started = time.perf_counter()
        if budget is not None and budget < len(workloads):
            if budget <= 0:
                logger.warning("crash test budget is 0; nothing checked")
                return CrashTestSummary()
            keep = set(random.Random(cfg.seed).sample(range(len(workloads)), budget))
            workloads = [w for i, w in enumerate(workloads) if i in keep]

        summary = CrashTestSummary()
        with ThreadPoolExecutor(max_workers=max(1, cfg.workers), thread_name_prefix="crashtest") as pool:
            for outcome in pool.map(self.check, workloads):
                summary.workloads += 1
                summary.cases += outcome.cases
                summary.failures.extend(outcome.failures)
        summary.elapsed_s = time.perf_counter() - started
        level = logging.INFO if summary.passed else logging.WARNING
        logger.log(
            level, "crash test: %d workloads, %d crash states, %d failures in %.1fs",
            summary.workloads, summary.cases, len(summary.failures), summary.elapsed_s,
        )
        return summary


def write_artifact(
    directory: Union[str, Path],
    workload: CrashWorkload,
    point: int,
    reason: str,
    events: list[TraceEvent],
) -> Path:
    """
    Write a failing case as a workload script that `run` can replay.

    The header names the workload and crash point so `crashtest --replay`
    can rebuild the exact crash state; the trace follows as comments.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digest = hashlib.blake2b(workload.name.encode(), digest_size=6).hexdigest()
    path = directory / f"crash-{digest}-{point}.txt"
    lines = [
        f"# workload: {workload.name}",
        f"# crash-point: {point}",
        f"# reason: {reason}",
        SETUP.rstrip("\n"),
        workload.script().rstrip("\n"),
        "# trace:",
        *(f"# {e.to_line()}" for e in events),
    ]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_artifact(path: Union[str, Path]) -> tuple[CrashWorkload, int]:
    """
    Raises:
        CrashTestError: If the file carries no workload header
    """
    name, point = None, None
    for line in Path(path).read_text().splitlines():
        if line.startswith("# workload: "):
            name = line[len("# workload: "):]
        elif line.startswith("# crash-point: "):
            point = int(line[len("# crash-point: "):])
    if name is None or point is None:
        raise CrashTestError(f"{path} is not a crash-test artifact")
    return CrashWorkload.from_name(name), point
