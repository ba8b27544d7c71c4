"""
Filebench-style benchmark driver.

Micro suites time one kind of request (sequential and random reads and
writes, file creation and deletion). The two "-lite" suites replay the
flowop sequences of the varmail and fileserver personalities against a
small per-thread fileset. Every run starts on a freshly formatted image,
prepares its files untimed, then releases all worker threads at once.
"""

import errno
import logging
import os
import random
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from app.api.fsapi import Connection
from app.core.config import settings
from app.filesystems.layout import ROOT_INO
from app.harness.session import format_image_file, format_memory_image, mounted
from app.models.schemas import (
    BenchResult,
    CreateArgs,
    CreatedReply,
    ErrReply,
    FsyncArgs,
    FsReply,
    GetattrArgs,
    LookupArgs,
    MkdirArgs,
    OpenArgs,
    ReadArgs,
    ReleaseArgs,
    UnlinkArgs,
    WriteArgs,
)
from app.services.blockdev import BlockDevice

logger = logging.getLogger(__name__)

MB = 1_000_000
FILESET_SIZE = 16

SUITES: dict[str, str] = {
    "seqread": "MB/s",
    "randread": "MB/s",
    "seqwrite": "MB/s",
    "randwrite": "MB/s",
    "create": "ops/s",
    "delete": "ops/s",
    "varmail-lite": "ops/s",
    "fileserver-lite": "ops/s",
}


class BenchError(Exception):
    """Benchmark could not be configured or prepared."""
    pass


@dataclass
class BenchConfig:
    """
    Attributes:
        suite: One of SUITES
        threads: Worker threads, each with its own directory
        opsize: Bytes per read or write request
        runs: Repetitions; stddev needs at least 3
        file_size: Per-thread file size for the read and write suites
        files: Per-thread file count (create, delete) or iterations (lite suites)
        seed: Seed for random offsets and fileset picks
        image: Benchmark on this image file instead of a memory image
        variant: File-system variant to mount
    """

    suite: str
    threads: int = 1
    opsize: int = 4096
    runs: int = 3
    file_size: int = 8 * 1024 * 1024
    files: int = 500
    seed: int = 0
    image: Optional[Path] = None
    variant: str = "bentofs"

    def validate(self) -> None:
        if self.suite not in SUITES:
            raise BenchError(f"unknown suite {self.suite!r}; choose from {', '.join(SUITES)}")
        if self.threads < 1 or self.runs < 1 or self.opsize < 1:
            raise BenchError("threads, runs and opsize must be positive")
        if self.file_size < self.opsize:
            raise BenchError(f"file size {self.file_size} is smaller than opsize {self.opsize}")

    def image_blocks(self, block_size: int) -> int:
        per_thread = self.file_size * 2 if SUITES[self.suite] == "MB/s" else (self.files + FILESET_SIZE) * (self.opsize * 3 + block_size)
        return max(4096, 2 * self.threads * per_thread // block_size)

    def inode_count(self) -> int:
        return max(64, self.threads * (self.files + FILESET_SIZE + 2) + 16)


class BenchOpFailed(Exception):
    def __init__(self, reply: ErrReply):
        self.errno = reply.errno
        super().__init__(os.strerror(reply.errno))


class _Client:
    """Thin request wrapper used by one worker thread."""

    def __init__(self, conn: Connection, pid: int):
        self.conn = conn
        self.pid = pid
        self.failures = 0

    def call(self, args) -> FsReply:
        reply = self.conn.request(args, pid=self.pid)
        if isinstance(reply, ErrReply):
            raise BenchOpFailed(reply)
        return reply

    def attempt(self, args) -> Optional[FsReply]:
        """Like call, but a failure is counted instead of raised."""
        try:
            return self.call(args)
        except BenchOpFailed:
            self.failures += 1
            return None

    def lookup(self, parent: int, name: str) -> Optional[int]:
        reply = self.conn.request(LookupArgs(parent=parent, name=name), pid=self.pid)
        return None if isinstance(reply, ErrReply) else reply.ino

    def create(self, parent: int, name: str) -> CreatedReply:
        return self.call(CreateArgs(parent=parent, name=name, flags=os.O_RDWR))

    def fill(self, ino: int, fh: int, size: int, chunk: int = 1 << 20) -> None:
        block = bytes(range(256)) * (chunk // 256 + 1)
        for offset in range(0, size, chunk):
            self.call(WriteArgs(ino=ino, fh=fh, offset=offset, data=block[:min(chunk, size - offset)]))


@dataclass
class _Worker:
    client: _Client
    home: int
    rng: random.Random
    config: BenchConfig
    files: Optional[dict[str, tuple[int, int]]] = None
    amount: int = 0
    ops: int = 0


# ---------------------------------------------------------------------------
# Preparation (untimed)
# ---------------------------------------------------------------------------


def _prepare(conn: Connection, config: BenchConfig, index: int) -> _Worker:
    client = _Client(conn, pid=1000 + index)
    home = client.call(MkdirArgs(parent=ROOT_INO, name=f"t{index}")).ino
    worker = _Worker(client, home, random.Random(f"{config.seed}:{index}"), config, files={})
    suite = config.suite
    if suite in ("seqread", "randread", "randwrite", "seqwrite"):
        created = client.create(home, "bigfile")
        if suite != "seqwrite":
            client.fill(created.ino, created.fh, config.file_size)
        worker.files["bigfile"] = (created.ino, created.fh)
    elif suite == "delete":
        payload = bytes(config.opsize)
        for i in range(config.files):
            created = client.create(home, f"f{i}")
            client.call(WriteArgs(ino=created.ino, fh=created.fh, offset=0, data=payload))
            client.call(ReleaseArgs(ino=created.ino, fh=created.fh))
    elif suite in ("varmail-lite", "fileserver-lite"):
        payload = bytes(config.opsize)
        for i in range(FILESET_SIZE):
            created = client.create(home, f"f{i}")
            client.call(WriteArgs(ino=created.ino, fh=created.fh, offset=0, data=payload))
            client.call(ReleaseArgs(ino=created.ino, fh=created.fh))
    return worker


def _finish(worker: _Worker) -> None:
    for ino, fh in (worker.files or {}).values():
        worker.client.attempt(ReleaseArgs(ino=ino, fh=fh))


# ---------------------------------------------------------------------------
# Timed bodies
# ---------------------------------------------------------------------------


def _offsets(worker: _Worker, sequential: bool) -> list[int]:
    cfg = worker.config
    count = cfg.file_size // cfg.opsize
    if sequential:
        return [i * cfg.opsize for i in range(count)]
    return [worker.rng.randrange(count) * cfg.opsize for _ in range(count)]


def _read_body(sequential: bool) -> Callable[[_Worker], None]:
    def body(w: _Worker) -> None:
        ino, fh = w.files["bigfile"]
        for offset in _offsets(w, sequential):
            reply = w.client.attempt(ReadArgs(ino=ino, fh=fh, offset=offset, size=w.config.opsize))
            w.ops += 1
            if reply is not None:
                w.amount += len(reply.data)
    return body


def _write_body(sequential: bool) -> Callable[[_Worker], None]:
    def body(w: _Worker) -> None:
        ino, fh = w.files["bigfile"]
        data = os.urandom(w.config.opsize)
        for offset in _offsets(w, sequential):
            reply = w.client.attempt(WriteArgs(ino=ino, fh=fh, offset=offset, data=data))
            w.ops += 1
            if reply is not None:
                w.amount += reply.count
        w.client.attempt(FsyncArgs(ino=ino, fh=fh))
    return body


def _create_body(w: _Worker) -> None:
    data = bytes(w.config.opsize)
    c = w.client
    for i in range(w.config.files):
        w.ops += 1
        reply = c.attempt(CreateArgs(parent=w.home, name=f"c{i}", flags=os.O_RDWR))
        if reply is None:
            continue
        c.attempt(WriteArgs(ino=reply.ino, fh=reply.fh, offset=0, data=data))
        c.attempt(ReleaseArgs(ino=reply.ino, fh=reply.fh))
        w.amount += 1


def _delete_body(w: _Worker) -> None:
    for i in range(w.config.files):
        w.ops += 1
        if w.client.attempt(UnlinkArgs(parent=w.home, name=f"f{i}")) is not None:
            w.amount += 1


class _Flowops:
    """Filebench flowops over one worker's fileset; each call is one op."""

    def __init__(self, worker: _Worker):
        self.w = worker
        self.c = worker.client
        self.fh: Optional[tuple[int, int]] = None
        self.data = bytes(worker.config.opsize)

    def _op(self, fn) -> None:
        self.w.ops += 1
        try:
            fn()
            self.w.amount += 1
        except BenchOpFailed:
            self.c.failures += 1

    def deletefile(self, name: str) -> None:
        self._op(lambda: self.c.call(UnlinkArgs(parent=self.w.home, name=name)))

    def createfile(self, name: str) -> None:
        def go():
            reply = self.c.create(self.w.home, name)
            self.fh = (reply.ino, reply.fh)
        self._op(go)

    def openfile(self, name: str) -> None:
        def go():
            ino = self.c.lookup(self.w.home, name)
            if ino is None:
                raise BenchOpFailed(ErrReply(errno=errno.ENOENT))
            self.fh = (ino, self.c.call(OpenArgs(ino=ino, flags=os.O_RDWR)).fh)
        self._op(go)

    def _need(self) -> tuple[int, int]:
        if self.fh is None:
            raise BenchOpFailed(ErrReply(errno=errno.EBADF))
        return self.fh

    def closefile(self) -> None:
        def go():
            ino, fh = self._need()
            self.fh = None
            self.c.call(ReleaseArgs(ino=ino, fh=fh))
        self._op(go)

    def fsync(self) -> None:
        def go():
            ino, fh = self._need()
            self.c.call(FsyncArgs(ino=ino, fh=fh))
        self._op(go)

    def appendfilerand(self) -> None:
        def go():
            ino, fh = self._need()
            size = self.c.call(GetattrArgs(ino=ino, fh=fh)).attr.size
            length = self.w.rng.randint(1, len(self.data))
            self.c.call(WriteArgs(ino=ino, fh=fh, offset=size, data=self.data[:length]))
        self._op(go)

    def writewholefile(self) -> None:
        def go():
            ino, fh = self._need()
            self.c.call(WriteArgs(ino=ino, fh=fh, offset=0, data=self.data))
        self._op(go)

    def readwholefile(self) -> None:
        def go():
            ino, fh = self._need()
            size = self.c.call(GetattrArgs(ino=ino, fh=fh)).attr.size
            self.c.call(ReadArgs(ino=ino, fh=fh, offset=0, size=size))
        self._op(go)

    def statfile(self, name: str) -> None:
        def go():
            if self.c.lookup(self.w.home, name) is None:
                raise BenchOpFailed(ErrReply(errno=errno.ENOENT))
        self._op(go)


def _varmail_body(w: _Worker) -> None:
    f = _Flowops(w)
    for _ in range(w.config.files):
        name = f"f{w.rng.randrange(FILESET_SIZE)}"
        f.deletefile(name)
        f.createfile(name)
        f.appendfilerand()
        f.fsync()
        f.closefile()
        f.openfile(name)
        f.readwholefile()
        f.appendfilerand()
        f.fsync()
        f.closefile()
        f.openfile(name)
        f.readwholefile()
        f.closefile()


def _fileserver_body(w: _Worker) -> None:
    f = _Flowops(w)
    for i in range(w.config.files):
        name = f"n{i}"
        f.createfile(name)
        f.writewholefile()
        f.closefile()
        f.openfile(name)
        f.appendfilerand()
        f.closefile()
        f.openfile(f"f{w.rng.randrange(FILESET_SIZE)}")
        f.readwholefile()
        f.closefile()
        f.deletefile(name)
        f.statfile(f"f{w.rng.randrange(FILESET_SIZE)}")


BODIES: dict[str, Callable[[_Worker], None]] = {
    "seqread": _read_body(True),
    "randread": _read_body(False),
    "seqwrite": _write_body(True),
    "randwrite": _write_body(False),
    "create": _create_body,
    "delete": _delete_body,
    "varmail-lite": _varmail_body,
    "fileserver-lite": _fileserver_body,
}


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def _target(config: BenchConfig):
    block_size = settings.BLOCK_SIZE
    total = config.image_blocks(block_size)
    if config.image is not None:
        return format_image_file(config.image, total * block_size, block_size, inode_count=config.inode_count())
    return BlockDevice.from_memory(format_memory_image(total, block_size, inode_count=config.inode_count()), block_size)


def run_once(config: BenchConfig) -> tuple[float, int, int]:
    """
    One timed run on a fresh image.

    Returns:
        (throughput in the suite's unit, ops issued, failed ops)
    """
    body = BODIES[config.suite]
    with mounted(_target(config), config.variant, name=f"bench-{config.suite}") as conn:
        workers = [_prepare(conn, config, i) for i in range(config.threads)]
        barrier = threading.Barrier(config.threads + 1)

        def work(w: _Worker) -> None:
            barrier.wait()
            body(w)

        with ThreadPoolExecutor(max_workers=config.threads, thread_name_prefix="bench") as pool:
            futures = [pool.submit(work, w) for w in workers]
            barrier.wait()
            started = time.perf_counter()
            for future in futures:
                future.result()
            elapsed = time.perf_counter() - started
        for w in workers:
            _finish(w)

    amount = sum(w.amount for w in workers)
    ops = sum(w.ops for w in workers)
    failures = sum(w.client.failures for w in workers)
    elapsed = max(elapsed, 1e-9)
    rate = amount / MB / elapsed if SUITES[config.suite] == "MB/s" else amount / elapsed
    return rate, ops, failures


def run_bench(config: BenchConfig) -> BenchResult:
    """
    Run a suite `config.runs` times and summarize.

    Raises:
        BenchError: If the configuration is invalid
    """
    config.validate()
    samples: list[float] = []
    ops = None
    failures = 0
    for run in range(config.runs):
        rate, run_ops, run_failures = run_once(config)
        logger.debug("%s run %d: %.2f %s", config.suite, run, rate, SUITES[config.suite])
        if ops is not None and run_ops != ops:
            logger.warning("%s issued %d ops in run %d but %d before", config.suite, run_ops, run, ops)
        ops = run_ops if ops is None else ops
        failures += run_failures
        samples.append(rate)

    stddev = None
    if len(samples) >= 3:
        stddev = statistics.stdev(samples)
    else:
        logger.warning("%s: stddev omitted, it needs at least 3 runs (got %d)", config.suite, len(samples))
    if failures:
        logger.warning("%s: %d operations failed", config.suite, failures)
    return BenchResult(
        workload=config.suite,
        threads=config.threads,
        opsize=config.opsize,
        unit=SUITES[config.suite],
        mean=statistics.fmean(samples),
        stddev=stddev,
        runs=len(samples),
        ops=ops or 0,
        failures=failures,
        samples=samples,
    )


def format_size(n: int) -> str:
    for unit, scale in (("m", 1 << 20), ("k", 1 << 10)):
        if n >= scale and n % scale == 0:
            return f"{n // scale}{unit}"
    return str(n)


def format_table(results: list[BenchResult]) -> str:
    """Rows of workload, threads, size, mean ± stddev and unit."""
    lines = [f"{'workload':<16} {'threads':>7} {'size':>6} {'mean':>12} {'stddev':>10}  unit"]
    for r in results:
        stddev = f"± {r.stddev:.2f}" if r.stddev is not None else "-"
        lines.append(f"{r.workload:<16} {r.threads:>7} {format_size(r.opsize):>6} {r.mean:>12.2f} {stddev:>10}  {r.unit}")
    return "\n".join(lines)


def format_result_line(r: BenchResult) -> str:
    """Machine-readable one-line form."""
    stddev = f"{r.stddev:.4f}" if r.stddev is not None else "-"
    return (
        f"bench {r.workload} threads={r.threads} opsize={r.opsize} mean={r.mean:.4f} "
        f"stddev={stddev} unit={r.unit} runs={r.runs} ops={r.ops} failures={r.failures}"
    )
