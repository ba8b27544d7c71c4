"""Tests for the hash-indexed directory tree."""

import errno
import random

import pytest

from app.core.errors import FsError
from app.filesystems.dirtree import DirTree, encode_name, name_hash, scan_records

BSIZE = 4096


class MemoryStore:
    def __init__(self, block_size: int = BSIZE):
        self.block_size = block_size
        self.blocks: list[bytes] = []

    def read_block(self, lblk: int) -> bytes:
        return self.blocks[lblk]

    def write_block(self, lblk: int, data: bytes) -> None:
        assert len(data) == self.block_size
        self.blocks[lblk] = data

    def append_block(self) -> int:
        self.blocks.append(bytes(self.block_size))
        return len(self.blocks) - 1


def new_tree(block_size: int = BSIZE) -> tuple[DirTree, MemoryStore]:
    store = MemoryStore(block_size)
    tree = DirTree(store, block_size)
    tree.format(10, 1)
    return tree, store


def raw_entries(store: MemoryStore) -> dict[bytes, int]:
    """Every record in every leaf block, found by scanning the blocks directly."""
    out = {}
    for block in store.blocks[1:]:
        for ino, name in scan_records(block):
            out[name] = ino
    return out


def test_fnv1a_known_vectors():
    assert name_hash(b"") == 0x811C9DC5
    assert name_hash(b"a") == 0xE40C292C
    assert name_hash(b"foobar") == 0xBF9CF968


def test_fresh_directory_holds_dot_entries():
    tree, store = new_tree()
    assert tree.lookup(b".") == 10
    assert tree.lookup(b"..") == 1
    assert tree.is_empty()
    assert tree.check() == []
    assert len(store.blocks) == 2


def test_insert_lookup_remove():
    tree, _ = new_tree()
    tree.insert(b"hello", 42)
    assert tree.lookup(b"hello") == 42
    with pytest.raises(FsError) as exc:
        tree.insert(b"hello", 43)
    assert exc.value.errno == errno.EEXIST
    assert tree.remove(b"hello") == 42
    assert tree.lookup(b"hello") is None
    with pytest.raises(FsError) as exc:
        tree.remove(b"hello")
    assert exc.value.errno == errno.ENOENT


def test_replace_points_entry_elsewhere():
    tree, _ = new_tree()
    tree.insert(b"x", 5)
    assert tree.replace(b"x", 6) == 5
    assert tree.lookup(b"x") == 6


def test_state_persists_through_the_store():
    tree, store = new_tree()
    for i in range(50):
        tree.insert(f"f{i}".encode(), 100 + i)
    reopened = DirTree(store, BSIZE)
    assert reopened.count == 52
    assert reopened.lookup(b"f17") == 117


def test_full_leaves_split_and_stay_hash_ordered():
    tree, store = new_tree(block_size=1024)
    for i in range(400):
        tree.insert(f"entry-{i:04d}".encode(), 1000 + i)
    assert len(tree.leaves()) > 1
    assert tree.check() == []
    for lo, hi, lblk in tree.leaves():
        for _, name in scan_records(store.blocks[lblk]):
            assert lo <= name_hash(name) < hi


def test_entries_cookies_resume_listing():
    tree, _ = new_tree()
    names = {f"n{i}".encode() for i in range(300)}
    for i, name in enumerate(sorted(names)):
        tree.insert(name, i + 100)
    listed = list(tree.entries())
    cookies = [c for c, _, _ in listed]
    assert cookies == sorted(cookies) and len(set(cookies)) == len(cookies)
    half = listed[len(listed) // 2][0]
    rest = [name for _, name, _ in tree.entries(half)]
    assert rest == [name for c, name, _ in listed if c > half]
    assert {name for _, name, _ in listed} == names | {b".", b".."}


def test_resume_after_a_removal_in_a_colliding_hash_group(monkeypatch):
    monkeypatch.setattr("app.filesystems.dirtree.name_hash", lambda name: 7)
    tree, _ = new_tree()
    names = [f"same-{i}".encode() for i in range(6)]
    for i, name in enumerate(names):
        tree.insert(name, 100 + i)
    listed = list(tree.entries())
    assert len(listed) == 8
    cookie = listed[3][0]
    expected = [name for c, name, _ in listed[4:]]

    tree.remove(listed[0][1])
    assert [name for _, name, _ in tree.entries(cookie)] == expected


def test_failed_second_split_keeps_the_first(monkeypatch):
    # small names sort by number; the long name lands in the upper half
    hashes = {b".": 1, b"..": 2}
    monkeypatch.setattr(
        "app.filesystems.dirtree.name_hash",
        lambda name: hashes.get(name, 10_000 if len(name) > 4 else 100 + int(name[1:])),
    )

    class FullStore(MemoryStore):
        def append_block(self) -> int:
            if len(self.blocks) >= 3:
                raise FsError(errno.ENOSPC, "no free blocks")
            return super().append_block()

    store = FullStore(512)
    tree = DirTree(store, 512)
    tree.format(10, 1)
    inserted = {b".": 10, b"..": 1}
    for i in range(40):
        name = f"s{i:03d}".encode()
        tree.insert(name, 100 + i)
        inserted[name] = 100 + i
    assert len(store.blocks) == 2

    with pytest.raises(FsError) as exc:
        tree.insert(b"L" * 255, 999)
    assert exc.value.errno == errno.ENOSPC
    assert len(store.blocks) == 3

    reloaded = DirTree(store, 512)
    assert reloaded.check() == []
    assert len(reloaded.leaves()) == 2
    assert reloaded.lookup(b"L" * 255) is None
    assert {name: ino for _, name, ino in reloaded.entries()} == inserted
    assert reloaded.count == len(inserted)


@pytest.mark.parametrize("name", ["", "a/b", "nul\0"])
def test_invalid_names(name):
    with pytest.raises(FsError) as exc:
        encode_name(name)
    assert exc.value.errno == errno.EINVAL


def test_name_too_long():
    with pytest.raises(FsError) as exc:
        encode_name("x" * 256)
    assert exc.value.errno == errno.ENAMETOOLONG
    assert encode_name("x" * 255) == b"x" * 255


@pytest.mark.slow
def test_matches_a_linear_scan_oracle():
    rng = random.Random(7)
    tree, store = new_tree()
    oracle = {b".": 10, b"..": 1}
    for step in range(10_000):
        name = f"file-{rng.randrange(3000)}".encode()
        action = rng.random()
        if action < 0.5:
            if name in oracle:
                with pytest.raises(FsError):
                    tree.insert(name, step)
            else:
                tree.insert(name, step + 100)
                oracle[name] = step + 100
        elif action < 0.8:
            assert tree.lookup(name) == oracle.get(name)
        elif name in oracle:
            assert tree.remove(name) == oracle.pop(name)
        if step % 1000 == 999:
            assert raw_entries(store) == oracle
    assert raw_entries(store) == oracle
    assert {name: ino for _, name, ino in tree.entries()} == oracle
    assert tree.count == len(oracle)
    assert tree.check() == []
