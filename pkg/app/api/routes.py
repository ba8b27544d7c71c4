"""HTTP control surface: mount images and relay File Operations API requests."""

import logging

from fastapi import APIRouter, HTTPException, status

from app.api.fsapi import (
    Connection,
    FsRegistration,
    NameInUse,
    NoSuchFs,
    TicketConsumed,
    dispatch,
    register_filesystem,
    registry,
    unregister_filesystem,
)
from app.filesystems import make_instance
from app.filesystems.layout import LayoutError
from app.models.schemas import (
    FsReply,
    FsRequest,
    MountRequest,
    MountResponse,
    UpgradeReport,
    UpgradeRequest,
)
from app.services.blockdev import BlockDeviceError
from app.services.journal import JournalError
from app.services.live_upgrade import UpgradeError, upgrade

logger = logging.getLogger(__name__)

router = APIRouter()


def _connection(name: str) -> Connection:
    try:
        return registry.get(name)
    except NoSuchFs:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"No file system mounted as {name!r}")


@router.get("/mounts", response_model=list[MountResponse], summary="List mounted file systems")
def list_mounts():
    out = []
    for name in registry.names():
        try:
            conn = registry.get(name)
        except NoSuchFs:
            continue
        out.append(MountResponse(name=name, generation=conn.generation, variant=conn.instance.variant))
    return out


@router.post(
    "/mounts",
    response_model=MountResponse,
    status_code=status.HTTP_201_CREATED,
    summary="Mount an image under a name",
)
def mount(request: MountRequest):
    """
    Mount a formatted image and register it.

    Raises:
        HTTPException: 409 if the name is taken, 400 if the image cannot be mounted
    """
    instance = make_instance(request.variant)
    try:
        conn = register_filesystem(FsRegistration(
            fs_name=request.name, instance=instance, devname=request.image, options=request.options,
        ))
    except NameInUse:
        raise HTTPException(status_code=status.HTTP_409_CONFLICT, detail=f"{request.name!r} is already mounted")
    except (BlockDeviceError, LayoutError, JournalError) as e:
        logger.warning("mount of %s failed: %s", request.image, e)
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=f"Cannot mount {request.image}: {e}")
    return MountResponse(name=conn.fs_name, generation=conn.generation, variant=instance.variant)


@router.post("/mounts/{name}/requests", response_model=FsReply, summary="Dispatch one file operation")
def relay(name: str, request: FsRequest):
    """Errors inside the file system come back as an err reply with status 200."""
    return dispatch(_connection(name), request)


@router.post("/mounts/{name}/upgrade", response_model=UpgradeReport, summary="Live-upgrade a mounted file system")
def live_upgrade(name: str, request: UpgradeRequest):
    try:
        ticket = register_filesystem(FsRegistration(fs_name=name, instance=make_instance(request.variant), is_upgrade=True))
        return upgrade(ticket)
    except NoSuchFs:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"No file system mounted as {name!r}")
    except (TicketConsumed, UpgradeError) as e:
        raise HTTPException(status_code=status.HTTP_409_CONFLICT, detail=str(e))


@router.delete("/mounts/{name}", status_code=status.HTTP_204_NO_CONTENT, summary="Unmount a file system")
def unmount(name: str):
    try:
        unregister_filesystem(name)
    except NoSuchFs:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"No file system mounted as {name!r}")
