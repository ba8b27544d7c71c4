"""bentoframe command line: mkfs, run, bench, crashtest, upgrade-demo, fsck, provdump, serve."""

import argparse
import logging
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

from app.core.config import settings
from app.core.logging import configure_logging
from app.filesystems import VARIANTS
from app.filesystems.layout import LayoutError
from app.filesystems.provenance import format_record, prov_infer
from app.harness.bench import SUITES, BenchConfig, BenchError, format_result_line, format_table, run_bench
from app.harness.crashtest import OPSET, CrashConfig, CrashTester, read_artifact, seq2_workloads
from app.harness.fsck import format_violation, fsck_image
from app.harness.session import format_image_file, mounted
from app.harness.upgrade_demo import LOADS, UpgradeDemoConfig, UpgradeDemoError, format_timeline, run_upgrade_demo
from app.harness.workload import ScriptError, StepFailed, WorkloadRunner, format_result, load_script
from app.models.schemas import MountOptions

logger = logging.getLogger("bentoframe")

_SIZE = re.compile(r"^(\d+)([kmgKMG]?)(i?[bB])?$")
_SCALE = {"": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30}


def parse_size(text: str) -> int:
    """"64M", "4k", "1g" or a plain byte count."""
    match = _SIZE.match(text.strip())
    if match is None:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return int(match.group(1)) * _SCALE[match.group(2).lower()]


def cmd_mkfs(args) -> int:
    try:
        path = format_image_file(
            args.image, args.size, args.block_size, journal_len=args.journal_len, inode_count=args.inodes,
        )
    except LayoutError as e:
        logger.error("mkfs failed: %s", e)
        return 1
    print(f"mkfs {path} size={args.size} block_size={args.block_size}")
    return 0


def cmd_run(args) -> int:
    try:
        script = load_script(args.script)
    except (ScriptError, OSError) as e:
        logger.error("%s", e)
        return 2
    options = MountOptions(block_size=args.block_size)
    with mounted(args.image, args.variant, options, name="run") as conn:
        runner = WorkloadRunner(conn, strict=args.strict)
        try:
            results = runner.run(script)
        except StepFailed as e:
            logger.error("%s", e)
            return e.errno
        finally:
            runner.close_all()
    for result in results:
        print(format_result(result))
    return 0


def cmd_bench(args) -> int:
    results = []
    for suite in args.suite or list(SUITES):
        config = BenchConfig(
            suite=suite, threads=args.threads, opsize=args.opsize, runs=args.runs,
            file_size=args.file_size, files=args.files, seed=args.seed, image=args.image,
            variant=args.variant,
        )
        try:
            results.append(run_bench(config))
        except BenchError as e:
            logger.error("%s", e)
            return 2
    print(format_table(results))
    for r in results:
        print(format_result_line(r))
    return 0


def cmd_crashtest(args) -> int:
    config = CrashConfig(
        variant=args.variant,
        journal_enabled=not args.no_journal,
        stress=args.stress,
        seed=args.seed,
        workers=args.threads,
        artifacts=args.artifacts,
    )
    tester = CrashTester(config)
    if args.replay:
        workload, point = read_artifact(args.replay)
        logger.info("replaying %s (failed at crash point %d)", workload.name, point)
        summary = tester.run([workload])
    else:
        summary = tester.run(seq2_workloads(args.ops.split(",")), budget=args.budget)
    print(
        f"crashtest workloads={summary.workloads} cases={summary.cases} "
        f"failures={len(summary.failures)} elapsed_s={summary.elapsed_s:.1f}"
    )
    for f in summary.failures:
        print(f"fail [{f.workload}] @{f.crash_point} {f.reason}" + (f" artifact={f.artifact}" if f.artifact else ""))
    return 0 if summary.passed else 1


def cmd_upgrade_demo(args) -> int:
    config = UpgradeDemoConfig(
        load=args.load, duration_ms=args.duration_ms, at_ms=args.at_ms, image=args.image,
        target_variant=args.variant,
    )
    try:
        timeline = run_upgrade_demo(config)
    except UpgradeDemoError as e:
        logger.error("%s", e)
        return 2
    print(format_timeline(timeline))
    if timeline.report is not None and not timeline.report.succeeded:
        return 1
    return 0


def cmd_fsck(args) -> int:
    report = fsck_image(args.image, args.block_size)
    state = "clean" if report.clean else f"{len(report.violations)} violations"
    print(f"fsck {args.image}: {state} inodes={report.inodes_checked} blocks={report.blocks_checked} orphans={report.orphans}")
    for v in report.violations:
        print(format_violation(v))
    return 0 if report.clean else 1


def cmd_provdump(args) -> int:
    with mounted(args.image, "bentoprov", MountOptions(block_size=args.block_size), name="provdump") as conn:
        records = conn.instance.read_log()
    for record in records:
        print(format_record(record))
    if args.infer:
        for edge in prov_infer(records).edges:
            print(edge.to_line())
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("main:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bentoframe", description="Userspace Bento file-system framework")
    parser.add_argument("--log-level", default=None, help=f"log level (default: BENTOFRAME_LOG or {settings.LOG})")
    subs = parser.add_subparsers(dest="command")

    image = argparse.ArgumentParser(add_help=False)
    image.add_argument("--image", type=Path, required=True, help="image file")
    image.add_argument("--block-size", type=int, default=settings.BLOCK_SIZE)

    p = subs.add_parser("mkfs", parents=[image], help="create and format an image file")
    p.add_argument("--size", type=parse_size, required=True, help="image size, e.g. 64M")
    p.add_argument("--journal-len", type=int, default=None)
    p.add_argument("--inodes", type=int, default=None)
    p.set_defaults(func=cmd_mkfs)

    p = subs.add_parser("run", parents=[image], help="run a workload script against an image")
    p.add_argument("--script", type=Path, required=True)
    p.add_argument("--strict", action="store_true", help="abort on the first error reply, exiting with its errno")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="bentofs")
    p.set_defaults(func=cmd_run)

    p = subs.add_parser("bench", help="run Filebench-style suites")
    p.add_argument("--suite", action="append", choices=list(SUITES), help="suite to run (repeatable; default all)")
    p.add_argument("--image", type=Path, default=None, help="image file to create per run (default: memory)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--opsize", type=parse_size, default=4096)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--file-size", type=parse_size, default=8 << 20)
    p.add_argument("--files", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=sorted(VARIANTS), default="bentofs")
    p.set_defaults(func=cmd_bench)

    p = subs.add_parser("crashtest", help="exhaustive two-operation crash-consistency test")
    p.add_argument("--ops", default=",".join(OPSET), help="comma-separated operations (default: all)")
    p.add_argument("--budget", type=int, default=None, help="check at most this many workloads")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=4, help="workloads checked in parallel")
    p.add_argument("--stress", action="store_true", help="also crash after every single write")
    p.add_argument("--no-journal", action="store_true", help="record workloads unjournaled (tester self-test)")
    p.add_argument("--artifacts", type=Path, default=None, help="directory for failing-case files")
    p.add_argument("--replay", type=Path, default=None, help="re-check the workload of an artifact file")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="bentofs")
    p.set_defaults(func=cmd_crashtest)

    p = subs.add_parser("upgrade-demo", help="live-upgrade under load with a throughput timeline")
    p.add_argument("--load", choices=list(LOADS), default="createdelete-1t")
    p.add_argument("--at-ms", type=int, default=500)
    p.add_argument("--duration-ms", type=int, default=1000)
    p.add_argument("--image", type=Path, default=None, help="formatted image (default: memory)")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="bentoprov", help="variant to upgrade to")
    p.set_defaults(func=cmd_upgrade_demo)

    p = subs.add_parser("fsck", parents=[image], help="check an unmounted image")
    p.set_defaults(func=cmd_fsck)

    p = subs.add_parser("provdump", parents=[image], help="print the provenance log")
    p.add_argument("--infer", action="store_true", help="also print inferred dependency edges")
    p.set_defaults(func=cmd_provdump)

    p = subs.add_parser("serve", help="serve the HTTP control surface")
    p.add_argument("--host", default=settings.HOST)
    p.add_argument("--port", type=int, default=settings.PORT)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if "func" not in args:
        parser.print_help()
        return 1
    configure_logging(args.log_level)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
