"""Tests for the file-system registry and request dispatch."""

import errno
import threading
import time

import pytest

from app.api.fsapi import (
    Connection,
    FsRegistration,
    FsRegistry,
    NameInUse,
    NoSuchFs,
    UpgradeTicket,
)
from app.core.errors import FsError
from app.filesystems import make_instance
from app.filesystems.layout import ROOT_INO
from app.models.schemas import (
    DestroyArgs,
    EntryReply,
    ErrReply,
    InitArgs,
    LookupArgs,
    MkdirArgs,
    OkReply,
    StatfsArgs,
)
from app.services.blockdev import BlockDevice
from conftest import SMALL_BSIZE, blank_image


class StubFs:
    """Minimal instance: lifecycle handlers plus a lookup that can misbehave."""

    variant = "stub"

    def __init__(self, fail_with=None):
        self.fail_with = fail_with
        self.mounted = False
        self.destroyed = False

    def bento_init(self, ctx, args):
        self.mounted = True
        return OkReply()

    def bento_destroy(self, ctx, args):
        self.destroyed = True
        return OkReply()

    def bento_lookup(self, ctx, args):
        if self.fail_with is not None:
            raise self.fail_with
        return OkReply()


def wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while not predicate():
        assert time.monotonic() < deadline, "condition never became true"
        time.sleep(0.005)


@pytest.fixture
def registry():
    return FsRegistry()


def test_register_returns_a_mounted_connection(registry):
    stub = StubFs()
    conn = registry.register_filesystem(FsRegistration(fs_name="a", instance=stub))
    assert isinstance(conn, Connection)
    assert conn.generation == 0
    assert stub.mounted
    assert registry.get("a") is conn
    assert registry.names() == ["a"]
    assert len(registry) == 1


def test_register_rejects_duplicates_and_empty_names(registry):
    registry.register_filesystem(FsRegistration(fs_name="a", instance=StubFs()))
    with pytest.raises(NameInUse):
        registry.register_filesystem(FsRegistration(fs_name="a", instance=StubFs()))
    with pytest.raises(ValueError):
        registry.register_filesystem(FsRegistration(fs_name="", instance=StubFs()))


def test_upgrade_registration_needs_an_existing_name(registry):
    with pytest.raises(NoSuchFs):
        registry.register_filesystem(FsRegistration(fs_name="ghost", instance=StubFs(), is_upgrade=True))
    conn = registry.register_filesystem(FsRegistration(fs_name="a", instance=StubFs()))
    new = StubFs()
    ticket = registry.register_filesystem(FsRegistration(fs_name="a", instance=new, is_upgrade=True))
    assert isinstance(ticket, UpgradeTicket)
    assert ticket.connection is conn
    assert not new.mounted


def test_unregister_destroys_and_shuts_the_connection(registry):
    stub = StubFs()
    conn = registry.register_filesystem(FsRegistration(fs_name="a", instance=stub))
    registry.unregister_filesystem(conn)
    assert stub.destroyed
    assert not conn.active
    reply = conn.request(LookupArgs(parent=ROOT_INO, name="x"))
    assert isinstance(reply, ErrReply) and reply.errno == errno.ESHUTDOWN
    with pytest.raises(NoSuchFs):
        registry.unregister_filesystem(conn)
    with pytest.raises(NoSuchFs):
        registry.get("a")


def test_unregister_by_name(registry):
    registry.register_filesystem(FsRegistration(fs_name="a", instance=StubFs()))
    registry.unregister_filesystem("a")
    assert registry.names() == []


@pytest.mark.parametrize("args", [InitArgs(), DestroyArgs()])
def test_lifecycle_opcodes_cannot_be_dispatched(registry, args):
    stub = StubFs()
    conn = registry.register_filesystem(FsRegistration(fs_name="a", instance=stub))
    reply = conn.request(args)
    assert isinstance(reply, ErrReply) and reply.errno == errno.EPERM
    assert not stub.destroyed


def test_missing_handler_is_enosys(registry):
    conn = registry.register_filesystem(FsRegistration(fs_name="a", instance=StubFs()))
    reply = conn.request(StatfsArgs())
    assert isinstance(reply, ErrReply) and reply.errno == errno.ENOSYS


@pytest.mark.parametrize("failure, expected", [
    (FsError(errno.EACCES, "nope"), errno.EACCES),
    (RuntimeError("boom"), errno.EIO),
])
def test_handler_failures_become_error_replies(registry, failure, expected):
    conn = registry.register_filesystem(FsRegistration(fs_name="a", instance=StubFs(fail_with=failure)))
    reply = conn.request(LookupArgs(parent=ROOT_INO, name="x"))
    assert isinstance(reply, ErrReply) and reply.errno == expected


def test_dispatch_waits_for_an_exclusive_holder(registry):
    conn = registry.register_filesystem(FsRegistration(fs_name="a", instance=StubFs()))
    replies = []
    with conn.gate.exclusive():
        worker = threading.Thread(target=lambda: replies.append(conn.request(LookupArgs(parent=1, name="x"))))
        worker.start()
        wait_for(lambda: conn.gate.blocked == 1)
        assert replies == []
        assert conn.gate.inflight == 0
    worker.join(timeout=5)
    assert isinstance(replies[0], OkReply)


def test_requests_reach_a_real_file_system(registry):
    dev = BlockDevice.from_memory(blank_image(), SMALL_BSIZE)
    conn = registry.register_filesystem(FsRegistration(
        fs_name="disk", instance=make_instance("bentofs", device=dev), devname=dev.name,
    ))
    try:
        made = conn.request(MkdirArgs(parent=ROOT_INO, name="d", mode=0o755))
        found = conn.request(LookupArgs(parent=ROOT_INO, name="d"))
        assert isinstance(found, EntryReply) and found.ino == made.ino
    finally:
        registry.unregister_filesystem(conn)


def test_unknown_variant():
    with pytest.raises(KeyError):
        make_instance("ext4")
