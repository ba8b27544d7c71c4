"""
Live-upgrade demo: run a load, swap the file system for its provenance
variant partway through, and report throughput in fixed time buckets.
"""

import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from app.api.fsapi import Connection, FsRegistration, FsRegistry
from app.filesystems import make_instance
from app.filesystems.layout import ROOT_INO
from app.harness.session import format_memory_image, mounted
from app.models.schemas import (
    CreateArgs,
    ErrReply,
    FsyncArgs,
    MkdirArgs,
    ReleaseArgs,
    UnlinkArgs,
    UpgradeTimeline,
    WriteArgs,
)
from app.services.blockdev import BlockDevice
from app.services.live_upgrade import upgrade

logger = logging.getLogger(__name__)

LOADS: dict[str, int] = {
    "createdelete-1t": 1,
    "syncwrite-10t": 10,
}
SYNCWRITE_SIZE = 4096
SYNCWRITE_SPAN = 64


class UpgradeDemoError(Exception):
    pass


@dataclass
class UpgradeDemoConfig:
    """
    Attributes:
        load: One of LOADS
        duration_ms: Length of the load run
        at_ms: When to upgrade; at or past duration_ms means never
        bucket_ms: Timeline bucket width
        image: Image file to run on; a memory image when unset
        total_blocks: Size of the memory image
        source_variant: Variant mounted at the start
        target_variant: Variant swapped in
    """

    load: str = "createdelete-1t"
    duration_ms: int = 1000
    at_ms: int = 500
    bucket_ms: int = 5
    image: Optional[Path] = None
    total_blocks: int = 4096
    source_variant: str = "bentofs"
    target_variant: str = "bentoprov"


@dataclass
class _LoadWorker:
    conn: Connection
    index: int
    stop: threading.Event
    t0: float = 0.0
    done: list[float] = field(default_factory=list)
    failed: int = 0

    @property
    def pid(self) -> int:
        return 2000 + self.index

    def call(self, args):
        reply = self.conn.request(args, pid=self.pid)
        self.done.append((time.perf_counter() - self.t0) * 1000.0)
        if isinstance(reply, ErrReply):
            self.failed += 1
            return None
        return reply


def _createdelete(w: _LoadWorker, home: int) -> None:
    i = 0
    while not w.stop.is_set():
        name = f"cd{i}"
        created = w.call(CreateArgs(parent=home, name=name, flags=os.O_RDWR))
        if created is not None:
            w.call(ReleaseArgs(ino=created.ino, fh=created.fh))
        w.call(UnlinkArgs(parent=home, name=name))
        i += 1


def _syncwrite(w: _LoadWorker, home: int) -> None:
    created = w.call(CreateArgs(parent=home, name="sync", flags=os.O_RDWR))
    if created is None:
        return
    data = bytes([w.index & 0xFF]) * SYNCWRITE_SIZE
    i = 0
    try:
        while not w.stop.is_set():
            w.call(WriteArgs(ino=created.ino, fh=created.fh, offset=(i % SYNCWRITE_SPAN) * SYNCWRITE_SIZE, data=data))
            w.call(FsyncArgs(ino=created.ino, fh=created.fh))
            i += 1
    finally:
        w.call(ReleaseArgs(ino=created.ino, fh=created.fh))


_BODIES: dict[str, Callable[[_LoadWorker, int], None]] = {
    "createdelete-1t": _createdelete,
    "syncwrite-10t": _syncwrite,
}


def run_upgrade_demo(config: Optional[UpgradeDemoConfig] = None) -> UpgradeTimeline:
    """
    Run the load and upgrade at config.at_ms.

    Returns:
        Timeline with per-bucket completion counts and the UpgradeReport;
        report stays None when at_ms falls outside the run

    Raises:
        UpgradeDemoError: If the load name is unknown
    """
    cfg = config or UpgradeDemoConfig()
    if cfg.load not in LOADS:
        raise UpgradeDemoError(f"unknown load {cfg.load!r}; choose from {', '.join(LOADS)}")
    threads = LOADS[cfg.load]
    body = _BODIES[cfg.load]
    timeline = UpgradeTimeline(
        load=cfg.load, threads=threads, duration_ms=cfg.duration_ms, at_ms=cfg.at_ms, bucket_ms=cfg.bucket_ms,
    )
    will_upgrade = 0 <= cfg.at_ms < cfg.duration_ms
    if not will_upgrade:
        logger.warning("upgrade at %d ms is outside the %d ms run; no upgrade", cfg.at_ms, cfg.duration_ms)

    target = cfg.image if cfg.image is not None else BlockDevice.from_memory(format_memory_image(cfg.total_blocks))
    registry = FsRegistry()
    name = "upgrade-demo"
    with mounted(target, cfg.source_variant, name=name, registry=registry) as conn:
        stop = threading.Event()
        workers = [_LoadWorker(conn, i, stop) for i in range(threads)]
        homes = [conn.request(MkdirArgs(parent=ROOT_INO, name=f"w{i}")).ino for i in range(threads)]
        new_instance = make_instance(cfg.target_variant)

        t0 = time.perf_counter()
        for w in workers:
            w.t0 = t0
        with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="load") as pool:
            futures = [pool.submit(body, w, home) for w, home in zip(workers, homes)]
            if will_upgrade:
                time.sleep(cfg.at_ms / 1000.0)
                ticket = registry.register_filesystem(FsRegistration(fs_name=name, instance=new_instance, is_upgrade=True))
                timeline.upgrade_at_ms = (time.perf_counter() - t0) * 1000.0
                timeline.report = upgrade(ticket)
            remaining = cfg.duration_ms / 1000.0 - (time.perf_counter() - t0)
            if remaining > 0:
                time.sleep(remaining)
            stop.set()
            for future in futures:
                future.result()

    nbuckets = max(1, math.ceil(cfg.duration_ms / cfg.bucket_ms))
    buckets = [0] * nbuckets
    completions = sorted(t for w in workers for t in w.done)
    for t in completions:
        buckets[min(int(t // cfg.bucket_ms), nbuckets - 1)] += 1
    timeline.buckets = buckets
    timeline.ops_total = len(completions)
    timeline.ops_failed = sum(w.failed for w in workers)

    if timeline.upgrade_at_ms is not None:
        start = timeline.upgrade_at_ms
        end = start + (timeline.report.pause_ms if timeline.report else 0.0)
        before = sum(1 for t in completions if t < start)
        after = sum(1 for t in completions if end <= t < cfg.duration_ms)
        timeline.rate_before = before / (start / 1000.0) if start > 0 else 0.0
        span = (cfg.duration_ms - end) / 1000.0
        timeline.rate_after = after / span if span > 0 else 0.0
    else:
        timeline.rate_before = timeline.ops_total / (cfg.duration_ms / 1000.0)

    logger.info(
        "%s: %d ops (%d failed), %.0f ops/s before and %.0f after the upgrade",
        cfg.load, timeline.ops_total, timeline.ops_failed, timeline.rate_before, timeline.rate_after,
    )
    return timeline


def format_timeline(t: UpgradeTimeline) -> str:
    """Line-based report: a summary line, one line per gap, one per bucket."""
    lines = [
        f"upgrade-demo load={t.load} threads={t.threads} upgraded={str(t.upgraded).lower()} "
        f"ops_total={t.ops_total} ops_failed={t.ops_failed} "
        f"rate_before={t.rate_before:.1f} rate_after={t.rate_after:.1f}"
    ]
    if t.report is not None:
        r = t.report
        lines.append(
            f"upgrade at_ms={t.upgrade_at_ms:.1f} pause_ms={r.pause_ms:.3f} ops_blocked={r.ops_blocked} "
            f"generation={r.old_generation}->{r.new_generation} {r.old_variant}->{r.new_variant}"
            + (f" error={r.error!r}" if r.error else "")
        )
    else:
        lines.append(f"upgrade skipped at_ms={t.at_ms} duration_ms={t.duration_ms}")
    for first, last in t.gaps():
        lines.append(f"gap {first * t.bucket_ms}-{(last + 1) * t.bucket_ms}ms")
    lines.extend(f"bucket {i * t.bucket_ms} {count}" for i, count in enumerate(t.buckets))
    return "\n".join(lines)
