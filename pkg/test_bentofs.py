"""Tests for the Bento-fs file system, driven through the File Operations API."""

import errno
import os
import re
import threading

import pytest

from app.filesystems.bento_fs import RENAME_EXCHANGE, RENAME_NOREPLACE
from app.filesystems.layout import MAX_FILE_SIZE, ROOT_INO
from app.harness.fsck import fsck
from app.harness.session import format_memory_image, mounted
from app.harness.workload import WorkloadRunner, format_result, parse_script
from app.models.schemas import (
    CreateArgs,
    DataReply,
    ErrReply,
    FileKind,
    ForgetArgs,
    GetattrArgs,
    LookupArgs,
    MkdirArgs,
    MountOptions,
    OpenArgs,
    OpendirArgs,
    OpenReply,
    ReadArgs,
    ReleaseArgs,
    ReleasedirArgs,
    RenameArgs,
    RmdirArgs,
    SetattrArgs,
    StatfsArgs,
    UnlinkArgs,
    WriteArgs,
)
from app.services.blockdev import BlockDevice
from conftest import SMALL_BSIZE, blank_image


def run(runner, text):
    return runner.run(parse_script(text))


def ok(reply):
    assert not isinstance(reply, ErrReply), f"unexpected errno {reply.errno}"
    return reply


def err(reply) -> int:
    assert isinstance(reply, ErrReply), f"expected an error, got {reply.variant}"
    return reply.errno


def attr(conn, ino):
    return ok(conn.request(GetattrArgs(ino=ino))).attr


def test_create_write_read_round_trip(runner):
    results = run(runner, """
        1 create /a
        1 write /a hello
        1 fsync /a
        1 read /a
    """)
    assert all(r.ok for r in results)
    assert results[-1].reply.data == b"hello"
    assert format_result(results[1]).endswith("written 5")


def test_lookup_of_missing_name(conn):
    assert err(conn.request(LookupArgs(parent=ROOT_INO, name="nope"))) == errno.ENOENT


def test_directory_link_counts_and_removal_rules(conn, runner):
    assert attr(conn, ROOT_INO).nlink == 2
    d = ok(conn.request(MkdirArgs(parent=ROOT_INO, name="d", mode=0o755)))
    assert d.attr.kind == FileKind.DIRECTORY
    assert d.attr.nlink == 2
    assert attr(conn, ROOT_INO).nlink == 3

    run(runner, "1 create /d/f\n1 close /d/f")
    assert err(conn.request(RmdirArgs(parent=ROOT_INO, name="d"))) == errno.ENOTEMPTY
    assert err(conn.request(UnlinkArgs(parent=ROOT_INO, name="d"))) == errno.EISDIR
    assert err(conn.request(RmdirArgs(parent=d.ino, name="f"))) == errno.ENOTDIR
    assert err(conn.request(RmdirArgs(parent=d.ino, name="."))) == errno.EINVAL

    ok(conn.request(UnlinkArgs(parent=d.ino, name="f")))
    ok(conn.request(RmdirArgs(parent=ROOT_INO, name="d")))
    assert attr(conn, ROOT_INO).nlink == 2
    assert err(conn.request(LookupArgs(parent=ROOT_INO, name="d"))) == errno.ENOENT


def test_create_existing_name(conn):
    ok(conn.request(MkdirArgs(parent=ROOT_INO, name="x", mode=0o755)))
    reply = conn.request(CreateArgs(parent=ROOT_INO, name="x", mode=0o644, flags=os.O_RDWR))
    assert err(reply) == errno.EEXIST


def test_rename_replaces_target_and_honours_noreplace(conn, runner):
    run(runner, """
        1 create /a
        1 write /a first
        1 close /a
        1 create /b
        1 write /b second
        1 close /b
    """)
    before = conn.request(StatfsArgs()).ffree
    reply = conn.request(RenameArgs(
        parent=ROOT_INO, name="a", newparent=ROOT_INO, newname="b", flags=RENAME_NOREPLACE,
    ))
    assert err(reply) == errno.EEXIST

    ok(conn.request(RenameArgs(parent=ROOT_INO, name="a", newparent=ROOT_INO, newname="b")))
    assert err(conn.request(LookupArgs(parent=ROOT_INO, name="a"))) == errno.ENOENT
    results = run(runner, "1 open /b r\n1 read /b\n1 close /b")
    assert results[1].reply.data == b"first"
    assert conn.request(StatfsArgs()).ffree == before + 1


def test_rename_exchange_is_unsupported(conn, runner):
    run(runner, "1 create /a\n1 close /a\n1 create /b\n1 close /b")
    reply = conn.request(RenameArgs(
        parent=ROOT_INO, name="a", newparent=ROOT_INO, newname="b", flags=RENAME_EXCHANGE,
    ))
    assert err(reply) == errno.EINVAL


def test_rename_moves_a_directory_and_its_parent_link(conn, runner):
    run(runner, "1 mkdir /a\n1 mkdir /b\n1 mkdir /a/c")
    a = runner.resolve("/a")
    b = runner.resolve("/b")
    ok(conn.request(RenameArgs(parent=a, name="c", newparent=b, newname="c")))
    c = runner.resolve("/b/c")
    assert ok(conn.request(LookupArgs(parent=c, name=".."))).ino == b
    assert attr(conn, a).nlink == 2
    assert attr(conn, b).nlink == 3


def test_rename_into_own_subtree(conn, runner):
    run(runner, "1 mkdir /a\n1 mkdir /a/b")
    b = runner.resolve("/a/b")
    reply = conn.request(RenameArgs(parent=ROOT_INO, name="a", newparent=b, newname="a"))
    assert err(reply) == errno.EINVAL


def test_rename_over_non_empty_directory(conn, runner):
    run(runner, "1 mkdir /a\n1 mkdir /b\n1 create /b/f\n1 close /b/f")
    reply = conn.request(RenameArgs(parent=ROOT_INO, name="a", newparent=ROOT_INO, newname="b"))
    assert err(reply) == errno.ENOTEMPTY


def test_hard_links(conn, runner):
    results = run(runner, """
        1 create /f
        1 write /f linked
        1 close /f
        1 link /f /g
        1 mkdir /d
        1 link /d /e
    """)
    assert results[3].ok
    assert results[5].reply.errno == errno.EPERM
    f = runner.resolve("/f")
    assert runner.resolve("/g") == f
    assert attr(conn, f).nlink == 2
    ok(conn.request(UnlinkArgs(parent=ROOT_INO, name="f")))
    assert attr(conn, f).nlink == 1
    results = run(runner, "1 open /g r\n1 read /g\n1 close /g")
    assert results[1].reply.data == b"linked"


def test_symlink_and_readlink(runner):
    results = run(runner, "1 symlink t /s\n1 readlink /s\n1 stat /s")
    assert results[0].ok
    assert results[1].reply.data == b"t"
    assert results[2].reply.attr.kind == FileKind.SYMLINK
    assert results[2].reply.attr.size == 1


def test_readlink_on_a_regular_file(runner):
    results = run(runner, "1 create /f\n1 close /f\n1 readlink /f")
    assert results[-1].reply.errno == errno.EINVAL


def test_truncate_shrinks_and_grows_with_zeros(runner):
    results = run(runner, """
        1 create /f
        1 write /f @3000:q
        1 close /f
        1 truncate /f 10
        1 truncate /f 20
        1 open /f r
        1 read /f
        1 close /f
    """)
    assert all(r.ok for r in results)
    assert results[6].reply.data == b"q" * 10 + bytes(10)


def test_truncate_directory(runner):
    results = run(runner, "1 mkdir /d\n1 truncate /d 0")
    assert results[-1].reply.errno == errno.EISDIR


def test_sparse_write_reads_zeros_in_the_hole(runner):
    results = run(runner, "1 create /f\n1 write /f end 5000\n1 read /f 8000")
    assert results[-1].reply.data == bytes(5000) + b"end"


def test_append_writes_at_end(conn, runner):
    run(runner, "1 create /f\n1 write /f abc\n1 close /f")
    ino = runner.resolve("/f")
    fh = ok(conn.request(OpenArgs(ino=ino, flags=os.O_WRONLY | os.O_APPEND))).fh
    ok(conn.request(WriteArgs(ino=ino, fh=fh, offset=0, data=b"def")))
    ok(conn.request(ReleaseArgs(ino=ino, fh=fh)))
    assert attr(conn, ino).size == 6


def test_write_on_read_only_handle(conn, runner):
    run(runner, "1 create /f\n1 close /f")
    ino = runner.resolve("/f")
    fh = ok(conn.request(OpenArgs(ino=ino, flags=os.O_RDONLY))).fh
    assert err(conn.request(WriteArgs(ino=ino, fh=fh, offset=0, data=b"x"))) == errno.EBADF
    assert err(conn.request(ReadArgs(ino=ino, fh=fh + 1000, offset=0, size=1))) == errno.EBADF
    ok(conn.request(ReleaseArgs(ino=ino, fh=fh)))


def test_readdir_lists_every_entry_across_calls(runner):
    script = "".join(f"1 create /f{i}\n1 close /f{i}\n" for i in range(200))
    run(runner, script)
    listing = run(runner, "1 readdir /")[0].reply
    names = [e.name for e in listing.entries]
    assert sorted(names) == sorted([".", ".."] + [f"f{i}" for i in range(200)])
    assert len(set(e.next_offset for e in listing.entries)) == len(names)


def test_statfs_tracks_inodes(conn, runner):
    fresh = ok(conn.request(StatfsArgs()))
    assert fresh.bsize == SMALL_BSIZE
    assert fresh.namelen == 255
    assert fresh.ffree == fresh.files - 1
    run(runner, "1 create /f\n1 write /f @4096\n1 close /f")
    used = conn.request(StatfsArgs())
    assert used.ffree == fresh.ffree - 1
    assert used.bfree < fresh.bfree
    ok(conn.request(UnlinkArgs(parent=ROOT_INO, name="f")))
    after = conn.request(StatfsArgs())
    assert (after.ffree, after.bfree) == (fresh.ffree, fresh.bfree)


def test_inode_table_exhaustion(mount):
    conn = mount(format_memory_image(256, 1024, inode_count=16))
    replies = [
        conn.request(MkdirArgs(parent=ROOT_INO, name=f"d{i}", mode=0o755))
        for i in range(16)
    ]
    assert err(replies[-1]) == errno.ENOSPC
    assert sum(not isinstance(r, ErrReply) for r in replies) == 15


def test_unlinked_file_stays_readable_until_release(conn, runner):
    run(runner, "1 create /f\n1 write /f data")
    fresh_ffree = conn.request(StatfsArgs()).ffree
    ino, fh = runner._handles[(1, "/f")]
    ok(conn.request(UnlinkArgs(parent=ROOT_INO, name="f")))
    assert err(conn.request(LookupArgs(parent=ROOT_INO, name="f"))) == errno.ENOENT
    assert ok(conn.request(ReadArgs(ino=ino, fh=fh, offset=0, size=100))).data == b"data"
    assert conn.request(StatfsArgs()).ffree == fresh_ffree
    run(runner, "1 close /f")
    assert conn.request(StatfsArgs()).ffree == fresh_ffree + 1
    assert err(conn.request(GetattrArgs(ino=ino))) == errno.ENOENT


def test_mkdir_never_reuses_the_inode_of_an_open_removed_directory(conn):
    old = ok(conn.request(MkdirArgs(parent=ROOT_INO, name="d", mode=0o755)))
    opened = ok(conn.request(OpendirArgs(ino=old.ino)))
    ok(conn.request(RmdirArgs(parent=ROOT_INO, name="d")))

    new = ok(conn.request(MkdirArgs(parent=ROOT_INO, name="d", mode=0o755)))
    assert new.ino != old.ino
    created = ok(conn.request(CreateArgs(parent=new.ino, name="x", mode=0o644, flags=os.O_RDWR)))
    ok(conn.request(ReleaseArgs(ino=created.ino, fh=created.fh)))
    # the removed directory cannot take new entries
    reply = conn.request(CreateArgs(parent=old.ino, name="y", mode=0o644, flags=os.O_RDWR))
    assert err(reply) == errno.ENOENT
    ok(conn.request(ReleasedirArgs(ino=old.ino, fh=opened.fh)))


def test_file_size_cap_with_4k_blocks(mount):
    conn = mount(BlockDevice.from_memory(format_memory_image(4096, 4096), 4096))
    created = ok(conn.request(CreateArgs(parent=ROOT_INO, name="big", mode=0o644, flags=os.O_RDWR)))
    ino, fh = created.ino, created.fh

    last = MAX_FILE_SIZE - 4096
    assert ok(conn.request(WriteArgs(ino=ino, fh=fh, offset=last, data=b"z" * 4096))).count == 4096
    assert attr(conn, ino).size == MAX_FILE_SIZE
    assert err(conn.request(WriteArgs(ino=ino, fh=fh, offset=MAX_FILE_SIZE, data=b"z"))) == errno.EFBIG
    assert err(conn.request(WriteArgs(ino=ino, fh=fh, offset=MAX_FILE_SIZE - 100, data=b"z" * 200))) == errno.EFBIG
    assert err(conn.request(SetattrArgs(ino=ino, size=MAX_FILE_SIZE + 1))) == errno.EFBIG
    data = ok(conn.request(ReadArgs(ino=ino, fh=fh, offset=last - 10, size=20))).data
    assert data == bytes(10) + b"z" * 10
    ok(conn.request(ReleaseArgs(ino=ino, fh=fh)))


def test_double_indirect_file_reads_back_and_fscks_clean():
    dev = BlockDevice.from_memory(format_memory_image(4096, 4096), 4096)
    # direct plus single indirect covers 1036 blocks; 5 MiB needs the double-indirect tree
    pattern = bytes(range(256)) * 4096 * 5
    chunk = 1 << 20
    with mounted(dev, options=MountOptions(commit_interval_ms=None)) as conn:
        created = ok(conn.request(CreateArgs(parent=ROOT_INO, name="big", mode=0o644, flags=os.O_RDWR)))
        for offset in range(0, len(pattern), chunk):
            piece = pattern[offset:offset + chunk]
            reply = ok(conn.request(WriteArgs(ino=created.ino, fh=created.fh, offset=offset, data=piece)))
            assert reply.count == len(piece)
        got = b"".join(
            ok(conn.request(ReadArgs(ino=created.ino, fh=created.fh, offset=offset, size=chunk))).data
            for offset in range(0, len(pattern), chunk)
        )
        assert got == pattern
        ok(conn.request(ReleaseArgs(ino=created.ino, fh=created.fh)))
    assert fsck(dev).clean


def test_contents_survive_remount(device):
    with mounted(device) as conn:
        created = ok(conn.request(MkdirArgs(parent=ROOT_INO, name="keep", mode=0o700)))
        f = ok(conn.request(CreateArgs(parent=created.ino, name="f", mode=0o600, flags=os.O_RDWR)))
        ok(conn.request(WriteArgs(ino=f.ino, fh=f.fh, offset=0, data=b"persisted")))
        ok(conn.request(ReleaseArgs(ino=f.ino, fh=f.fh)))
    assert fsck(device).clean

    with mounted(device) as conn:
        d = ok(conn.request(LookupArgs(parent=ROOT_INO, name="keep")))
        assert d.attr.perm == 0o700
        f = ok(conn.request(LookupArgs(parent=d.ino, name="f")))
        fh = ok(conn.request(OpenArgs(ino=f.ino, flags=os.O_RDONLY))).fh
        assert conn.request(ReadArgs(ino=f.ino, fh=fh, offset=0, size=64)).data == b"persisted"
        ok(conn.request(ReleaseArgs(ino=f.ino, fh=fh)))


def test_orphan_left_by_a_crash_is_freed_at_next_mount(device):
    with mounted(device, options=MountOptions(commit_interval_ms=None)) as conn:
        f = ok(conn.request(CreateArgs(parent=ROOT_INO, name="tmp", mode=0o644, flags=os.O_RDWR)))
        ok(conn.request(WriteArgs(ino=f.ino, fh=f.fh, offset=0, data=b"o" * 5000)))
        ok(conn.request(UnlinkArgs(parent=ROOT_INO, name="tmp")))
        conn.instance.journal.force_commit()
        crashed = BlockDevice.from_memory(device.snapshot(), SMALL_BSIZE)
        ffree = conn.request(StatfsArgs()).ffree
        ok(conn.request(ReleaseArgs(ino=f.ino, fh=f.fh)))

    with mounted(crashed) as conn:
        assert conn.request(StatfsArgs()).ffree == ffree + 1
    report = fsck(crashed)
    assert report.clean
    assert report.orphans == 0


def test_no_data_block_writes_for_files_deleted_before_writeback(mount):
    _dropped_writes(mount, iterations=50)


@pytest.mark.slow
def test_no_data_block_writes_over_a_thousand_iterations(mount):
    _dropped_writes(mount, iterations=1000)


def _dropped_writes(mount, iterations):
    bsize = 4096
    dev = BlockDevice.from_memory(format_memory_image(2048, bsize), bsize)
    conn = mount(dev)
    data_start = conn.instance.sb.data_start
    block = b"\xd5" * bsize
    payload = block * 16

    dev.trace.start()
    for i in range(iterations):
        f = ok(conn.request(CreateArgs(parent=ROOT_INO, name=f"f{i}", mode=0o644, flags=os.O_RDWR)))
        ok(conn.request(WriteArgs(ino=f.ino, fh=f.fh, offset=0, data=payload)))
        ok(conn.request(UnlinkArgs(parent=ROOT_INO, name=f"f{i}")))
        ok(conn.request(ReleaseArgs(ino=f.ino, fh=f.fh)))
    conn.instance.journal.force_commit()
    conn.instance.journal.checkpoint()
    events = dev.trace.stop()

    home_writes = [e for e in events if e.kind == "W" and e.blockno >= data_start]
    assert not [e for e in home_writes if e.data == block]


def test_differential_replies_match_across_variants(mount, clock):
    script = parse_script("""
        1 mkdir /A
        1 create /A/foo
        1 write /A/foo @6000
        1 close /A/foo
        1 rename /A/foo /A/bar
        1 link /A/bar /baz
        1 symlink t /A/s
        1 unlink /A/bar
        1 readdir /A
        1 stat /baz
        1 rmdir /A
        1 open /baz r
        1 read /baz 100 50
        1 close /baz
        2 truncate /baz 7
        2 unlink /missing
    """)
    outputs = []
    for variant in ("bentofs", "bentoprov"):
        runner = WorkloadRunner(mount(blank_image(), variant=variant))
        # handle numbers are opaque and differ between variants
        outputs.append([re.sub(r"fh=\d+", "fh=N", format_result(r)) for r in runner.run(script)])
        runner.close_all()
    assert outputs[0] == outputs[1]
    assert outputs[0][-1].endswith("err ENOENT")


def test_open_directory_for_writing(conn):
    assert err(conn.request(OpenArgs(ino=ROOT_INO, flags=os.O_RDWR))) == errno.EISDIR
    reply = conn.request(OpenArgs(ino=ROOT_INO, flags=os.O_RDONLY))
    assert isinstance(reply, OpenReply)
    ok(conn.request(ReleaseArgs(ino=ROOT_INO, fh=reply.fh)))


def test_read_past_end_returns_nothing(runner):
    results = run(runner, "1 create /f\n1 write /f abc\n1 read /f 10 3")
    assert isinstance(results[-1].reply, DataReply)
    assert results[-1].reply.data == b""


def fill_disk(conn):
    """Create /fill and grow it until no data block is left; returns its create reply."""
    fill = ok(conn.request(CreateArgs(parent=ROOT_INO, name="fill", mode=0o644, flags=os.O_RDWR)))
    total = conn.request(StatfsArgs()).blocks * SMALL_BSIZE
    written = ok(conn.request(WriteArgs(ino=fill.ino, fh=fill.fh, offset=0, data=b"f" * total))).count
    assert 0 < written < total
    assert conn.request(StatfsArgs()).bfree == 0
    return fill


def test_full_disk_create_rename_and_write_change_nothing(device):
    long = "n" * 200
    with mounted(device, options=MountOptions(commit_interval_ms=None)) as conn:
        d = ok(conn.request(MkdirArgs(parent=ROOT_INO, name="d", mode=0o755)))
        x = ok(conn.request(CreateArgs(parent=d.ino, name="x", mode=0o644, flags=os.O_RDWR)))
        ok(conn.request(ReleaseArgs(ino=x.ino, fh=x.fh)))
        fill = fill_disk(conn)

        # long names fill the root's only leaf; the next one needs a new block
        created = []
        for i in range(20):
            name = f"{i:02d}{long}"
            reply = conn.request(CreateArgs(parent=ROOT_INO, name=name, mode=0o644, flags=os.O_RDWR))
            if isinstance(reply, ErrReply):
                break
            ok(conn.request(ReleaseArgs(ino=reply.ino, fh=reply.fh)))
            created.append(name)
        assert err(reply) == errno.ENOSPC
        assert err(conn.request(LookupArgs(parent=ROOT_INO, name=name))) == errno.ENOENT
        before = conn.request(StatfsArgs())

        assert err(conn.request(MkdirArgs(parent=d.ino, name="sub", mode=0o755))) == errno.ENOSPC
        reply = conn.request(RenameArgs(parent=d.ino, name="x", newparent=ROOT_INO, newname=f"zz{long}"))
        assert err(reply) == errno.ENOSPC
        assert ok(conn.request(LookupArgs(parent=d.ino, name="x"))).ino == x.ino
        assert err(conn.request(LookupArgs(parent=ROOT_INO, name=f"zz{long}"))) == errno.ENOENT
        reply = conn.request(RenameArgs(parent=ROOT_INO, name="fill", newparent=ROOT_INO, newname=f"yy{long}"))
        assert err(reply) == errno.ENOSPC
        assert ok(conn.request(LookupArgs(parent=ROOT_INO, name="fill"))).ino == fill.ino

        size = attr(conn, fill.ino).size
        assert err(conn.request(WriteArgs(ino=fill.ino, fh=fill.fh, offset=size, data=b"more"))) == errno.ENOSPC
        assert attr(conn, fill.ino).size == size
        after = conn.request(StatfsArgs())
        assert (after.ffree, after.bfree) == (before.ffree, before.bfree)
        ok(conn.request(ReleaseArgs(ino=fill.ino, fh=fill.fh)))
    assert fsck(device).clean

    with mounted(device) as conn:
        for name in created + ["fill", "d"]:
            ok(conn.request(LookupArgs(parent=ROOT_INO, name=name)))
        assert ok(conn.request(LookupArgs(parent=d.ino, name="x"))).ino == x.ino


def test_full_disk_refuses_logged_operations_before_logging(device):
    with mounted(device, "bentoprov", MountOptions(commit_interval_ms=None)) as conn:
        keep = ok(conn.request(CreateArgs(parent=ROOT_INO, name="keep", mode=0o644, flags=os.O_RDWR)))
        ok(conn.request(ReleaseArgs(ino=keep.ino, fh=keep.fh)))
        fill = fill_disk(conn)
        log = conn.instance.read_log()
        ffree = conn.request(StatfsArgs()).ffree

        reply = conn.request(CreateArgs(parent=ROOT_INO, name="new", mode=0o644, flags=os.O_RDWR))
        assert err(reply) == errno.ENOSPC
        assert err(conn.request(LookupArgs(parent=ROOT_INO, name="new"))) == errno.ENOENT
        reply = conn.request(RenameArgs(parent=ROOT_INO, name="keep", newparent=ROOT_INO, newname="kept"))
        assert err(reply) == errno.ENOSPC
        assert ok(conn.request(LookupArgs(parent=ROOT_INO, name="keep"))).ino == keep.ino
        assert err(conn.request(OpenArgs(ino=keep.ino, flags=os.O_RDONLY))) == errno.ENOSPC

        assert conn.instance.read_log() == log
        assert conn.request(StatfsArgs()).ffree == ffree
        ok(conn.request(SetattrArgs(ino=fill.ino, size=0)))
        ok(conn.request(ReleaseArgs(ino=fill.ino, fh=fill.fh)))
    assert fsck(device).clean


def test_lookup_counts_stay_exact_under_concurrent_lookups(conn, runner):
    run(runner, "1 create /f\n1 close /f")
    ino = ok(conn.request(LookupArgs(parent=ROOT_INO, name="f"))).ino
    fs = conn.instance
    base = fs._lookups[ino]

    def look():
        for _ in range(200):
            ok(conn.request(LookupArgs(parent=ROOT_INO, name="f")))

    threads = [threading.Thread(target=look) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert fs._lookups[ino] == base + 8 * 200
    ok(conn.request(ForgetArgs(ino=ino, nlookup=base + 8 * 200)))
    assert ino not in fs._lookups
