"""
File Operations API dispatcher and file-system registry.

A Connection pairs a registered name with the instance serving it and a
quiescence gate. Dispatch holds the gate shared for the whole call and
only ever hands the instance request arguments and takes back replies.
"""

import errno
import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Optional, Union

from pydantic import ValidationError

from app.core.errors import FsError, errno_name
from app.core.gate import QuiescenceGate
from app.models.schemas import (
    DestroyArgs,
    ErrReply,
    FsReply,
    FsRequest,
    InitArgs,
    MountOptions,
    Opcode,
    RequestContext,
)

logger = logging.getLogger(__name__)

# Driven by register/unregister and the upgrade orchestrator, never by dispatch.
LIFECYCLE_OPCODES = frozenset({Opcode.INIT, Opcode.DESTROY, Opcode.UPDATE_PREPARE, Opcode.UPDATE_TRANSFER})


class FsApiError(Exception):
    """Base exception for registry failures."""
    pass


class NameInUse(FsApiError):
    """A file system is already registered under this name."""
    pass


class NoSuchFs(FsApiError):
    """No active file system is registered under this name."""
    pass


class TicketConsumed(FsApiError):
    """An upgrade ticket was used twice."""
    pass


@dataclass
class FsRegistration:
    """
    Request to serve `fs_name` with `instance`.

    Attributes:
        fs_name: Registered name
        instance: File-system instance exposing bento_<opcode> handlers
        is_upgrade: Replace the instance serving an existing name
        devname: Device image path passed to bento_init
        options: Mount options passed to bento_init as fc_info
    """

    fs_name: str
    instance: Any
    is_upgrade: bool = False
    devname: str = ""
    options: MountOptions = field(default_factory=MountOptions)


class Connection:
    """One active registration: the serving instance behind its gate."""

    def __init__(self, fs_name: str, instance: Any, devname: str = ""):
        self.fs_name = fs_name
        self.instance = instance
        self.devname = devname
        self.gate = QuiescenceGate()
        self.generation = 0
        self.active = True
        self.upgrade_lock = threading.Lock()
        self._serial = itertools.count(1)
        self._serial_lock = threading.Lock()

    def next_unique(self) -> int:
        with self._serial_lock:
            return next(self._serial)

    def install(self, instance: Any) -> None:
        """Swap in an upgraded instance. Caller holds the gate exclusively."""
        self.instance = instance
        self.generation += 1

    def shut_down(self) -> None:
        self.active = False

    def request(self, args: Any, uid: int = 0, gid: int = 0, pid: int = 0) -> FsReply:
        """Dispatch one call built from an argument model."""
        return dispatch(self, FsRequest(ctx=RequestContext(uid=uid, gid=gid, pid=pid), args=args))

    def __repr__(self) -> str:
        return f"Connection({self.fs_name!r}, generation={self.generation}, active={self.active})"


class UpgradeTicket:
    """Permission to replace a connection's instance, usable once."""

    def __init__(self, connection: Connection, instance: Any):
        self.connection = connection
        self.instance = instance
        self._consumed = False
        self._lock = threading.Lock()

    @property
    def consumed(self) -> bool:
        return self._consumed

    def consume(self) -> Connection:
        """
        Raises:
            TicketConsumed: If the ticket was already used
            NoSuchFs: If the connection has been unregistered since
        """
        with self._lock:
            if self._consumed:
                raise TicketConsumed(f"upgrade ticket for {self.connection.fs_name} already used")
            self._consumed = True
        if not self.connection.active:
            raise NoSuchFs(self.connection.fs_name)
        return self.connection


def dispatch(conn: Connection, request: FsRequest) -> FsReply:
    """
    Route one request to the connection's current instance.

    Blocks while an upgrade or unregister holds the gate; the request then
    runs against whichever instance is installed. Handler failures come
    back as ErrReply, never as exceptions.
    """
    if not conn.active:
        return ErrReply(errno=errno.ESHUTDOWN)
    opcode = request.opcode
    ctx = request.ctx.model_copy(update={"unique": conn.next_unique()})

    with conn.gate.shared():
        if not conn.active:
            return ErrReply(errno=errno.ESHUTDOWN)
        if opcode in LIFECYCLE_OPCODES:
            return ErrReply(errno=errno.EPERM)
        handler = getattr(conn.instance, f"bento_{opcode.value}", None)
        if handler is None:
            return ErrReply(errno=errno.ENOSYS)
        try:
            reply = handler(ctx, request.args)
        except FsError as e:
            logger.debug("%s #%d -> %s %s", opcode.value, ctx.unique, errno_name(e.errno), e.detail)
            return ErrReply(errno=e.errno)
        except ValidationError:
            logger.exception("%s #%d built an invalid reply", opcode.value, ctx.unique)
            return ErrReply(errno=errno.EIO)
        except Exception:
            logger.exception("%s #%d failed inside %s", opcode.value, ctx.unique, conn.fs_name)
            return ErrReply(errno=errno.EIO)
    return reply


class FsRegistry:
    """Active registrations by name. Mutations are serialized by one lock."""

    def __init__(self):
        self._lock = threading.Lock()
        self._connections: dict[str, Connection] = {}

    def register_filesystem(self, reg: FsRegistration) -> Union[Connection, UpgradeTicket]:
        """
        Register a file system or announce an upgrade of one.

        Returns:
            A Connection at generation 0 with the instance mounted, or an
            UpgradeTicket when reg.is_upgrade is set

        Raises:
            ValueError: If fs_name is empty
            NameInUse: If the name is taken and this is not an upgrade
            NoSuchFs: If this is an upgrade of an unregistered name
        """
        if not reg.fs_name:
            raise ValueError("fs_name must be non-empty")
        with self._lock:
            existing = self._connections.get(reg.fs_name)
            if reg.is_upgrade:
                if existing is None:
                    raise NoSuchFs(reg.fs_name)
                logger.info("upgrade of %s announced (generation %d)", reg.fs_name, existing.generation)
                return UpgradeTicket(existing, reg.instance)
            if existing is not None:
                raise NameInUse(reg.fs_name)
            reg.instance.bento_init(RequestContext(), InitArgs(devname=reg.devname, fc_info=reg.options))
            conn = Connection(reg.fs_name, reg.instance, reg.devname)
            self._connections[reg.fs_name] = conn
        logger.info("registered %s (%s)", reg.fs_name, getattr(reg.instance, "variant", type(reg.instance).__name__))
        return conn

    def unregister_filesystem(self, conn: Union[Connection, str]) -> None:
        """
        Drain, destroy and forget a registration.

        Raises:
            NoSuchFs: If it is not (or no longer) registered
        """
        with self._lock:
            name = conn if isinstance(conn, str) else conn.fs_name
            current = self._connections.get(name)
            if current is None or (not isinstance(conn, str) and current is not conn):
                raise NoSuchFs(name)
            del self._connections[name]
        with current.upgrade_lock, current.gate.exclusive():
            try:
                current.instance.bento_destroy(RequestContext(), DestroyArgs())
            finally:
                current.shut_down()
        logger.info("unregistered %s", name)

    def get(self, name: str) -> Connection:
        with self._lock:
            conn = self._connections.get(name)
        if conn is None:
            raise NoSuchFs(name)
        return conn

    def names(self) -> list[str]:
        with self._lock:
            return sorted(self._connections)

    def __len__(self) -> int:
        with self._lock:
            return len(self._connections)


registry = FsRegistry()


def register_filesystem(reg: FsRegistration, on: Optional[FsRegistry] = None) -> Union[Connection, UpgradeTicket]:
    return (registry if on is None else on).register_filesystem(reg)


def unregister_filesystem(conn: Union[Connection, str], on: Optional[FsRegistry] = None) -> None:
    (registry if on is None else on).unregister_filesystem(conn)
