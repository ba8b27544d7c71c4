"""Tests for the harness: fsck, workload scripts, crash tester, benchmarks, upgrade demo and CLI."""

import errno
from pathlib import Path

import pytest

from app.filesystems.layout import ROOT_INO, DiskInode, bit_location, read_superblock
from app.harness.bench import BenchConfig, BenchError, format_result_line, format_table, run_bench
from app.harness.cli import main, parse_size
from app.harness.crashtest import (
    CrashConfig,
    CrashOp,
    CrashTester,
    CrashTestError,
    CrashWorkload,
    crash_image,
    crash_points,
    op_universe,
    read_artifact,
    seq2_workloads,
    write_artifact,
)
from app.harness.fsck import fsck, fsck_image, format_violation
from app.harness.session import format_image_file, format_memory_image, mounted
from app.harness.upgrade_demo import UpgradeDemoConfig, UpgradeDemoError, format_timeline, run_upgrade_demo
from app.harness.workload import (
    ScriptError,
    StepFailed,
    WorkloadRunner,
    format_result,
    parse_script,
    payload,
)
from app.models.schemas import MkdirArgs, MountOptions
from app.services.blockdev import BlockDevice, TraceEvent
from conftest import SMALL_BSIZE


def checks(report):
    return {v.check for v in report.violations}


# ---------------------------------------------------------------------------
# fsck
# ---------------------------------------------------------------------------


def test_fresh_image_is_clean(device):
    report = fsck(device)
    assert report.clean
    assert report.orphans == 0
    assert report.blocks_checked == device.block_count


def test_used_image_is_clean(device):
    with mounted(device) as conn:
        WorkloadRunner(conn, strict=True).run(parse_script("""
            1 mkdir /d
            1 create /d/f
            1 write /d/f @5000
            1 close /d/f
            1 link /d/f /g
            1 symlink /d/f /s
        """))
    report = fsck(device)
    assert report.clean, [format_violation(v) for v in report.violations]


def test_stray_inode_bitmap_bit(device):
    sb = read_superblock(device)
    blockno, byte, mask = bit_location(10, sb.inode_bitmap_start, sb.block_size)
    block = bytearray(device.read_block(blockno))
    block[byte] |= mask
    device.write_block(blockno, bytes(block))

    report = fsck(device)
    assert checks(report) == {"bitmaps"}
    assert report.violations[0].ino == 10
    assert format_violation(report.violations[0]).startswith("bitmaps ino=10 block=-")


def test_wrong_root_link_count(device):
    sb = read_superblock(device)
    blockno, offset = sb.inode_location(ROOT_INO)
    block = bytearray(device.read_block(blockno))
    root = DiskInode.unpack(block, offset)
    root.nlink += 5
    packed = root.pack()
    block[offset:offset + len(packed)] = packed
    device.write_block(blockno, bytes(block))

    assert "nlink" in checks(fsck(device))


def test_unrecovered_journal_is_reported(device):
    with mounted(device, options=MountOptions(commit_interval_ms=None)) as conn:
        conn.request(MkdirArgs(parent=ROOT_INO, name="d", mode=0o755))
        conn.instance.journal.force_commit()
        crashed = device.snapshot()

    report = fsck(BlockDevice.from_memory(crashed, SMALL_BSIZE))
    assert "journal" in checks(report)

    recovered = BlockDevice.from_memory(crashed, SMALL_BSIZE)
    with mounted(recovered):
        pass
    assert fsck(recovered).clean


def test_fsck_image_on_a_file(tmp_path):
    path = format_image_file(tmp_path / "fs.img", 256 * 1024, 1024)
    assert fsck_image(path, 1024).clean


# ---------------------------------------------------------------------------
# Workload scripts
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("text", [
    "x create /a",
    "1 frobnicate /a",
    "1 create",
    "1 mkdir /a 755 extra",
    "1 open /a x",
    "1 read /a",
    "1 create /a\n2 close /a",
    "1 create 'unterminated",
])
def test_bad_scripts(text):
    with pytest.raises(ScriptError):
        parse_script(text)


def test_script_error_names_the_line():
    with pytest.raises(ScriptError) as exc:
        parse_script("1 mkdir /a\n# comment\n\n1 bogus /a")
    assert exc.value.lineno == 4


def test_parse_keeps_threads_and_comments():
    script = parse_script("1 mkdir /a  # make it\nT1 2 create /a/x\n[T2] 3 create /a/y\n")
    assert [s.op for s in script.steps] == ["mkdir", "create", "create"]
    assert [s.thread for s in script.steps] == [None, 1, 2]
    assert script.threads == 2
    phases = script.phases()
    assert len(phases) == 2
    assert len(phases[1]) == 2
    assert parse_script(script.to_text()).steps[1].to_line() == "T1 2 create /a/x"


def test_payload():
    assert payload("hi") == b"hi"
    assert payload("@4:z") == b"zzzz"
    assert payload("@20") == b"0123456789abcdef0123"


def test_simple_script(runner):
    results = runner.run(parse_script("""
        1 create /f
        1 write /f hi
        1 fsync /f
        1 read /f
        1 stat /f
        1 close /f
        1 readdir /
        1 rmdir /f
    """))
    lines = [format_result(r) for r in results]
    assert lines[1] == "3 write written 2"
    assert lines[2] == "4 fsync ok"
    assert lines[3] == "5 read data 'hi'"
    assert lines[4].endswith("kind=regular size=2 nlink=1")
    assert lines[6].startswith("8 readdir entries ")
    assert set(lines[6].split()[-1].split(",")) == {".", "..", "f"}
    assert lines[7] == "9 rmdir err ENOTDIR"


def test_strict_mode_stops_at_the_first_error(conn):
    runner = WorkloadRunner(conn, strict=True)
    with pytest.raises(StepFailed) as exc:
        runner.run(parse_script("1 mkdir /a\n1 mkdir /a\n1 mkdir /b"))
    assert exc.value.errno == errno.EEXIST
    assert exc.value.step.lineno == 2
    assert not isinstance(runner.resolve("/b"), int)


def _threaded_script(threads, files):
    lines = [f"0 mkdir /d{t}" for t in range(threads)]
    for t in range(threads):
        for i in range(files):
            lines.append(f"T{t} {t + 1} create /d{t}/f{i}")
            lines.append(f"T{t} {t + 1} close /d{t}/f{i}")
    return parse_script("\n".join(lines))


def test_threaded_phases():
    dev = BlockDevice.from_memory(format_memory_image(2048, SMALL_BSIZE), SMALL_BSIZE)
    with mounted(dev) as conn:
        runner = WorkloadRunner(conn, strict=True)
        results = runner.run(_threaded_script(4, 50))
        assert len(results) == 4 + 2 * 4 * 50
        assert all(r.ok for r in results)
        assert [r.step.lineno for r in results] == list(range(1, len(results) + 1))
        assert isinstance(runner.resolve("/d3/f49"), int)
    assert fsck(dev).clean


@pytest.mark.slow
def test_ten_thousand_files_from_forty_threads():
    dev = BlockDevice.from_memory(format_memory_image(16384, 4096, inode_count=10240), 4096)
    with mounted(dev) as conn:
        results = WorkloadRunner(conn, strict=True).run(_threaded_script(40, 250))
        assert len(results) == 40 + 2 * 40 * 250
    assert fsck(dev).clean


# ---------------------------------------------------------------------------
# Crash tester
# ---------------------------------------------------------------------------


def test_op_universe_sizes():
    assert len(op_universe()) == 36
    assert len(seq2_workloads()) == 2592
    assert len(op_universe(["create", "unlink"])) == 6
    with pytest.raises(CrashTestError):
        op_universe(["chmod"])


def test_workload_names_round_trip_through_text():
    workload = CrashWorkload((CrashOp("write", ("/A/foo", "@100:a")), CrashOp("rename", ("/A/foo", "/B/baz"))), True)
    assert workload.name == "write /A/foo @100:a | sync | rename /A/foo /B/baz"
    assert CrashWorkload.from_name(workload.name) == workload
    steps = parse_script(workload.script()).steps
    assert [s.op for s in steps] == ["open", "write", "close", "sync", "rename"]
    with pytest.raises(CrashTestError):
        CrashWorkload.from_name("explode /A")


def test_crash_points_and_images():
    block = 16
    events = [
        TraceEvent("W", 0, b"a" * block),
        TraceEvent("F"),
        TraceEvent("W", 1, b"b" * block),
        TraceEvent("W", 2, b"c" * block),
        TraceEvent("F"),
    ]
    assert crash_points(events) == [2, 5]
    assert crash_points(events, stress=True) == [1, 2, 3, 4, 5]

    base = bytes(3 * block)
    assert crash_image(base, events, 2, block) == b"a" * block + bytes(2 * block)
    assert crash_image(base, events, 5, block) == b"a" * block + b"b" * block + b"c" * block
    partial = crash_image(base, events, 4, block, rng=_Never())
    assert partial == b"a" * block + bytes(block) + b"c" * block


class _Never:
    def random(self):
        return 1.0


def test_journaled_workloads_survive_every_crash(tmp_path):
    tester = CrashTester(CrashConfig(workers=2, artifacts=tmp_path))
    workload = CrashWorkload.from_name("create /A/bar | sync | unlink /A/foo")
    outcome = tester.check(workload)
    assert outcome.failures == []
    assert outcome.cases == sum(1 for e in outcome.events if e.kind == "F")
    assert outcome.cases > 0

    summary = tester.run(seq2_workloads(["create", "unlink"]), budget=4)
    assert summary.passed
    assert summary.workloads == 4
    assert list(tmp_path.iterdir()) == []


def test_stress_mode_crashes_after_every_write():
    tester = CrashTester(CrashConfig(stress=True, workers=1, seed=3))
    outcome = tester.check(CrashWorkload.from_name("mkdir /A/bar | rmdir /A/bar"))
    assert outcome.cases == len(outcome.events)
    assert outcome.failures == []


@pytest.mark.slow
def test_full_two_operation_universe():
    summary = CrashTester(CrashConfig()).run(seq2_workloads())
    assert summary.workloads == 2592
    assert summary.passed, [f"{f.workload} : {f.reason}" for f in summary.failures[:5]]


def test_unjournaled_workloads_are_caught(tmp_path):
    tester = CrashTester(CrashConfig(journal_enabled=False, workers=1, artifacts=tmp_path))
    summary = tester.run([CrashWorkload.from_name("create /A/bar | create /B/baz")])
    assert not summary.passed
    failure = summary.failures[0]
    assert failure.artifact is not None

    workload, point = read_artifact(failure.artifact)
    assert workload.name == "create /A/bar | create /B/baz"
    assert point == failure.crash_point
    replay = parse_script(Path(failure.artifact).read_text())
    assert [s.op for s in replay.steps][-4:] == ["create", "close", "create", "close"]


def test_zero_budget_checks_nothing():
    summary = CrashTester(CrashConfig(workers=1)).run(seq2_workloads(["mkdir"]), budget=0)
    assert summary.workloads == 0
    assert summary.passed


def test_artifact_round_trip(tmp_path):
    workload = CrashWorkload.from_name("link /A/foo /B/baz")
    path = write_artifact(tmp_path / "out", workload, 7, "fsck: nlink", [TraceEvent("W", 3, b"x"), TraceEvent("F")])
    assert read_artifact(path) == (workload, 7)
    text = path.read_text()
    assert "# W 3 " in text
    assert "# reason: fsck: nlink" in text
    (tmp_path / "junk.txt").write_text("1 mkdir /a\n")
    with pytest.raises(CrashTestError):
        read_artifact(tmp_path / "junk.txt")


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


def test_create_suite():
    result = run_bench(BenchConfig(suite="create", files=20, runs=1))
    assert result.unit == "ops/s"
    assert result.ops == 20
    assert result.failures == 0
    assert result.stddev is None
    assert result.mean > 0


def test_read_suite_repeats_for_stddev():
    result = run_bench(BenchConfig(suite="seqread", file_size=64 * 1024, runs=3))
    assert result.unit == "MB/s"
    assert result.ops == 16
    assert result.stddev is not None
    assert len(result.samples) == 3


@pytest.mark.parametrize("suite", ["randwrite", "delete", "varmail-lite", "fileserver-lite"])
def test_other_suites_run_cleanly(suite):
    result = run_bench(BenchConfig(suite=suite, threads=2, file_size=64 * 1024, files=5, runs=1))
    assert result.failures == 0
    assert result.ops > 0


def test_bad_bench_configs():
    with pytest.raises(BenchError):
        run_bench(BenchConfig(suite="nosuch"))
    with pytest.raises(BenchError):
        run_bench(BenchConfig(suite="seqread", file_size=100, opsize=4096))


def test_bench_formatting():
    result = run_bench(BenchConfig(suite="create", files=5, runs=1))
    table = format_table([result]).splitlines()
    assert table[0].split()[:3] == ["workload", "threads", "size"]
    assert table[1].split()[:3] == ["create", "1", "4k"]
    line = format_result_line(result)
    assert line.startswith("bench create threads=1 opsize=4096 ")
    assert "stddev=- " in line


# ---------------------------------------------------------------------------
# Upgrade demo
# ---------------------------------------------------------------------------


def test_upgrade_demo_under_load():
    timeline = run_upgrade_demo(UpgradeDemoConfig(duration_ms=300, at_ms=150, bucket_ms=10))
    assert timeline.upgraded
    assert timeline.report.new_variant == "bentoprov"
    assert timeline.ops_failed == 0
    assert timeline.ops_total > 0
    assert len(timeline.buckets) == 30
    lines = format_timeline(timeline).splitlines()
    assert lines[0].startswith("upgrade-demo load=createdelete-1t threads=1 upgraded=true")
    assert lines[1].startswith("upgrade at_ms=")


def test_upgrade_blocks_at_most_one_op_per_thread():
    timeline = run_upgrade_demo(UpgradeDemoConfig(load="syncwrite-10t", duration_ms=400, at_ms=200))
    report = timeline.report
    assert report.succeeded
    assert report.ops_blocked <= timeline.threads == 10
    assert report.pause_ms < 500
    assert timeline.ops_failed == 0


def test_upgrade_demo_without_an_upgrade():
    timeline = run_upgrade_demo(UpgradeDemoConfig(duration_ms=100, at_ms=100, bucket_ms=10))
    assert not timeline.upgraded
    assert timeline.report is None
    assert format_timeline(timeline).splitlines()[1] == "upgrade skipped at_ms=100 duration_ms=100"


def test_upgrade_demo_rejects_unknown_loads():
    with pytest.raises(UpgradeDemoError):
        run_upgrade_demo(UpgradeDemoConfig(load="tarball"))


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("text, size", [("512k", 512 << 10), ("64M", 64 << 20), ("1g", 1 << 30), ("4096", 4096), ("2KiB", 2048)])
def test_parse_size(text, size):
    assert parse_size(text) == size


def test_mkfs_run_and_fsck(tmp_path, capsys):
    image = tmp_path / "cli.img"
    assert main(["mkfs", "--image", str(image), "--size", "512k", "--block-size", "1024"]) == 0
    assert capsys.readouterr().out.strip() == f"mkfs {image} size=524288 block_size=1024"

    script = tmp_path / "hi.txt"
    script.write_text("1 create /f\n1 write /f hi\n1 fsync /f\n1 read /f\n1 close /f\n")
    assert main(["run", "--image", str(image), "--block-size", "1024", "--script", str(script)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1:4] == ["2 write written 2", "3 fsync ok", "4 read data 'hi'"]

    assert main(["fsck", "--image", str(image), "--block-size", "1024"]) == 0
    assert capsys.readouterr().out.startswith(f"fsck {image}: clean ")


def test_strict_run_exits_with_the_errno(tmp_path):
    image = format_image_file(tmp_path / "cli.img", 512 * 1024, 1024)
    script = tmp_path / "bad.txt"
    script.write_text("1 rmdir /missing\n")
    argv = ["run", "--image", str(image), "--block-size", "1024", "--script", str(script), "--strict"]
    assert main(argv) == errno.ENOENT


def test_provdump(tmp_path, capsys):
    image = format_image_file(tmp_path / "prov.img", 512 * 1024, 1024)
    script = tmp_path / "copy.txt"
    script.write_text("1 create /a\n1 close /a\n1 open /a r\n1 create /b\n1 close /a\n1 close /b\n")
    common = ["--image", str(image), "--block-size", "1024"]
    assert main(["run", *common, "--script", str(script), "--variant", "bentoprov"]) == 0
    capsys.readouterr()
    assert main(["provdump", *common, "--infer"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("1 Create 1 ")
    assert out[-1].endswith(" (1)") and " -> " in out[-1]


def test_no_command_prints_help(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().out
