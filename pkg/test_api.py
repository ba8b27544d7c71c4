"""Tests for the HTTP control surface."""

import pytest
from fastapi.testclient import TestClient

from app.harness.fsck import fsck_image
from app.harness.session import format_image_file
from main import app

client = TestClient(app)
BSIZE = 1024


@pytest.fixture
def image(tmp_path):
    return format_image_file(tmp_path / "disk.img", 512 * BSIZE, BSIZE)


@pytest.fixture
def mounted_name(image):
    name = "apitest"
    response = client.post("/api/mounts", json={
        "name": name, "image": str(image), "options": {"block_size": BSIZE},
    })
    assert response.status_code == 201
    yield name
    client.delete(f"/api/mounts/{name}")


def relay(name, args, **ctx):
    response = client.post(f"/api/mounts/{name}/requests", json={"ctx": ctx, "args": args})
    assert response.status_code == 200
    return response.json()


def test_health():
    response = client.get("/health")
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "healthy"
    assert body["mounts"] >= 0


def test_mount_lists_and_unmounts(image):
    response = client.post("/api/mounts", json={
        "name": "listed", "image": str(image), "variant": "bentoprov", "options": {"block_size": BSIZE},
    })
    assert response.json() == {"name": "listed", "generation": 0, "variant": "bentoprov"}
    assert {"name": "listed", "generation": 0, "variant": "bentoprov"} in client.get("/api/mounts").json()
    assert client.delete("/api/mounts/listed").status_code == 204
    assert client.delete("/api/mounts/listed").status_code == 404


def test_mount_conflicts_and_bad_images(mounted_name, image, tmp_path):
    again = client.post("/api/mounts", json={"name": mounted_name, "image": str(image)})
    assert again.status_code == 409
    missing = client.post("/api/mounts", json={"name": "nope", "image": str(tmp_path / "missing.img")})
    assert missing.status_code == 400
    bad_name = client.post("/api/mounts", json={"name": "a/b", "image": str(image)})
    assert bad_name.status_code == 422


def test_requests_are_relayed(mounted_name):
    made = relay(mounted_name, {"opcode": "mkdir", "parent": 1, "name": "docs"})
    assert made["variant"] == "entry"
    found = relay(mounted_name, {"opcode": "lookup", "parent": 1, "name": "docs"})
    assert found["ino"] == made["ino"]
    assert found["attr"]["kind"] == made["attr"]["kind"]

    created = relay(mounted_name, {"opcode": "create", "parent": made["ino"], "name": "f", "flags": 2}, pid=7)
    assert created["variant"] == "created"
    written = relay(mounted_name, {
        "opcode": "write", "ino": created["ino"], "fh": created["fh"], "offset": 0, "data": "aGVsbG8=",
    })
    assert written == {"variant": "written", "count": 5}
    data = relay(mounted_name, {"opcode": "read", "ino": created["ino"], "fh": created["fh"], "offset": 0, "size": 10})
    assert data == {"variant": "data", "data": "aGVsbG8="}
    relay(mounted_name, {"opcode": "release", "ino": created["ino"], "fh": created["fh"]})


def test_file_system_errors_come_back_as_err_replies(mounted_name):
    reply = relay(mounted_name, {"opcode": "lookup", "parent": 1, "name": "missing"})
    assert reply == {"variant": "err", "errno": 2}
    reply = relay(mounted_name, {"opcode": "init"})
    assert reply["variant"] == "err"


def test_requests_to_unknown_mounts():
    response = client.post("/api/mounts/ghost/requests", json={"args": {"opcode": "statfs"}})
    assert response.status_code == 404


def test_live_upgrade_over_http(mounted_name, image):
    relay(mounted_name, {"opcode": "mkdir", "parent": 1, "name": "before"})
    report = client.post(f"/api/mounts/{mounted_name}/upgrade", json={"variant": "bentoprov"}).json()
    assert report["succeeded"] is True
    assert (report["old_generation"], report["new_generation"]) == (0, 1)
    assert relay(mounted_name, {"opcode": "lookup", "parent": 1, "name": "before"})["variant"] == "entry"
    assert client.post("/api/mounts/ghost/upgrade", json={}).status_code == 404

    client.delete(f"/api/mounts/{mounted_name}")
    assert fsck_image(image, BSIZE).clean
