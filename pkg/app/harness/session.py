"""Mounting helpers shared by the harness tools."""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Union

from app.api.fsapi import Connection, FsRegistration, FsRegistry, NoSuchFs
from app.core.config import settings
from app.filesystems import make_instance
from app.filesystems.layout import Clock, Geometry, mkfs
from app.models.schemas import MountOptions
from app.services.blockdev import BlockDevice, create_image, open_device

logger = logging.getLogger(__name__)


def format_memory_image(
    total_blocks: int,
    block_size: int = settings.BLOCK_SIZE,
    journal_len: Optional[int] = None,
    inode_count: Optional[int] = None,
) -> bytes:
    """Bytes of a freshly formatted image held in memory."""
    dev = BlockDevice.from_memory(total_blocks * block_size, block_size)
    mkfs(dev, Geometry.for_device(total_blocks, block_size, journal_len, inode_count))
    return dev.snapshot()


def format_image_file(
    path: Union[str, Path],
    size: int,
    block_size: int = settings.BLOCK_SIZE,
    journal_len: Optional[int] = None,
    inode_count: Optional[int] = None,
) -> Path:
    """
    Create an image file of `size` bytes (rounded down to whole blocks) and format it.

    Raises:
        DeviceTooSmall: If the size cannot hold a file system
    """
    total_blocks = size // block_size
    path = create_image(path, total_blocks * block_size)
    dev = open_device(path, block_size)
    try:
        mkfs(dev, Geometry.for_device(total_blocks, block_size, journal_len, inode_count))
    finally:
        dev.close()
    return path


@contextmanager
def mounted(
    target: Union[str, Path, BlockDevice],
    variant: str = "bentofs",
    options: Optional[MountOptions] = None,
    name: str = "harness",
    clock: Optional[Clock] = None,
    registry: Optional[FsRegistry] = None,
) -> Iterator[Connection]:
    """
    Register an image under a private registry and unregister it on exit.

    Args:
        target: Image path, or an open device (left open afterwards)
        variant: File-system variant to mount
        options: Mount options; block size is taken from a device target
        name: Registered name
        clock: Timestamp source for the instance
        registry: Registry to use; a fresh one by default
    """
    registry = registry if registry is not None else FsRegistry()
    options = options or MountOptions()
    if isinstance(target, BlockDevice):
        instance = make_instance(variant, device=target, clock=clock)
        devname = target.name
        options = options.model_copy(update={"block_size": target.block_size})
    else:
        instance = make_instance(variant, clock=clock)
        devname = str(target)
    conn = registry.register_filesystem(FsRegistration(
        fs_name=name, instance=instance, devname=devname, options=options,
    ))
    try:
        yield conn
    finally:
        try:
            registry.unregister_filesystem(conn)
        except NoSuchFs:
            logger.debug("%s was already unregistered", name)
