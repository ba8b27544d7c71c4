"""
Live upgrade: quiesce a connection, move the old instance's state into a
new instance, swap it in.

The state travels as a TransferCapsule, an in-memory ownership handoff of
the open device, the running journal and the semantic tables the file
system keeps in memory. Nothing is serialized.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Optional

from app.models.schemas import RequestContext, UpgradeReport

if TYPE_CHECKING:
    from app.api.fsapi import UpgradeTicket

logger = logging.getLogger(__name__)


class UpgradeError(Exception):
    """Base exception for live upgrade failures."""
    pass


class VersionMismatch(UpgradeError):
    """The new instance cannot read the capsule's format version."""
    pass


class TransferRefused(UpgradeError):
    """The new instance rejected the transferred state."""
    pass


@dataclass
class ProvenanceState:
    """Provenance configuration carried by capsules of format 1 and later."""

    enabled: bool = False
    log_ino: int = 2
    next_seq: int = 1


@dataclass
class TransferCapsule:
    """
    Everything an instance hands to its replacement.

    Attributes:
        format_version: Capsule layout version the producer wrote
        variant: Producer's variant name
        device: Open block device, cache included
        owns_device: Whether the holder must close the device at destroy
        journal: Running journal with its committer thread and sequence
        superblock: Loaded superblock
        options: Mount options in force
        inode_cursor: Next-fit cursor of the inode allocator
        block_cursor: Next-fit cursor of the block allocator
        handles: Open-handle table, fh -> OpenFile
        next_fh: Next file handle number to hand out
        deferred_free: Unlinked inodes still open, ino -> open handle count
        lookups: Lookup counts per inode
        provenance: Provenance configuration; None in format 0
    """

    format_version: int
    variant: str
    device: Any
    owns_device: bool
    journal: Any
    superblock: Any
    options: Any
    inode_cursor: int
    block_cursor: int
    handles: dict[int, Any] = field(default_factory=dict)
    next_fh: int = 1
    deferred_free: dict[int, int] = field(default_factory=dict)
    lookups: dict[int, int] = field(default_factory=dict)
    provenance: Optional[ProvenanceState] = None
    consumed: bool = False

    def release(self) -> None:
        """Drop every reference once the receiver has adopted the state."""
        self.device = self.journal = self.superblock = None
        self.handles = {}
        self.deferred_free = {}
        self.lookups = {}
        self.consumed = True


def upgrade(ticket: "UpgradeTicket", ctx: Optional[RequestContext] = None) -> UpgradeReport:
    """
    Swap the ticket's new instance in for the connection's current one.

    The gate is held exclusively from before update_prepare until the swap
    (or rollback) is done; dispatches arriving meanwhile block and then run
    against whichever instance is installed when the gate reopens.

    Args:
        ticket: Ticket returned by register_filesystem(is_upgrade=True)
        ctx: Request context passed to the transfer calls

    Returns:
        UpgradeReport; succeeded is False when the new instance refused or
        failed to adopt the state and the old instance was restored

    Raises:
        TicketConsumed: If the ticket was already used
        UpgradeError: If rollback itself failed and the connection was shut down
    """
    ctx = ctx or RequestContext()
    conn = ticket.consume()
    new = ticket.instance

    with conn.upgrade_lock:
        old = conn.instance
        old_generation = conn.generation
        old_variant = getattr(old, "variant", type(old).__name__)
        new_variant = getattr(new, "variant", type(new).__name__)
        blocked_before = conn.gate.blocked
        error: Optional[str] = None

        logger.info("upgrading %s: %s -> %s (generation %d)", conn.fs_name, old_variant, new_variant, old_generation)
        with conn.gate.exclusive():
            start = time.perf_counter()
            capsule = old.bento_update_prepare()
            logger.debug("capsule v%d prepared with %d handles", capsule.format_version, len(capsule.handles))
            try:
                new.bento_update_transfer(ctx, capsule)
            except Exception as e:
                error = f"{type(e).__name__}: {e}"
                logger.warning("upgrade of %s failed (%s); restoring %s", conn.fs_name, error, old_variant)
                try:
                    old.bento_update_transfer(ctx, capsule)
                except Exception:
                    logger.exception("rollback of %s failed; shutting the connection down", conn.fs_name)
                    conn.shut_down()
                    raise UpgradeError(f"rollback failed after {error}")
            else:
                conn.install(new)
            pause_ms = (time.perf_counter() - start) * 1000.0

        ops_blocked = conn.gate.blocked - blocked_before

    report = UpgradeReport(
        fs_name=conn.fs_name,
        old_generation=old_generation,
        new_generation=conn.generation,
        pause_ms=pause_ms,
        ops_blocked=ops_blocked,
        succeeded=error is None,
        error=error,
        old_variant=old_variant,
        new_variant=new_variant,
    )
    if report.succeeded:
        logger.info(
            "upgraded %s to generation %d: paused %.2f ms, %d ops blocked",
            conn.fs_name, report.new_generation, pause_ms, ops_blocked,
        )
    return report
