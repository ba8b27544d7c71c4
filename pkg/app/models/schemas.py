"""Pydantic models for requests, replies and reports crossing the framework boundary."""

import base64
import binascii
import stat
from enum import Enum
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, PositiveInt, field_validator

from app.core.config import settings


# ---------------------------------------------------------------------------
# Shared vocabulary
# ---------------------------------------------------------------------------


class FileKind(str, Enum):
    """Kind of object an inode describes."""

    REGULAR = "regular"
    DIRECTORY = "directory"
    SYMLINK = "symlink"


_KIND_MODE_BITS = {
    FileKind.REGULAR: stat.S_IFREG,
    FileKind.DIRECTORY: stat.S_IFDIR,
    FileKind.SYMLINK: stat.S_IFLNK,
}


class Opcode(str, Enum):
    """One entry per File Operations API call."""

    INIT = "init"
    DESTROY = "destroy"
    LOOKUP = "lookup"
    FORGET = "forget"
    GETATTR = "getattr"
    SETATTR = "setattr"
    READLINK = "readlink"
    MKNOD = "mknod"
    MKDIR = "mkdir"
    UNLINK = "unlink"
    RMDIR = "rmdir"
    SYMLINK = "symlink"
    RENAME = "rename"
    LINK = "link"
    OPEN = "open"
    READ = "read"
    WRITE = "write"
    FLUSH = "flush"
    RELEASE = "release"
    FSYNC = "fsync"
    OPENDIR = "opendir"
    READDIR = "readdir"
    RELEASEDIR = "releasedir"
    FSYNCDIR = "fsyncdir"
    STATFS = "statfs"
    ACCESS = "access"
    CREATE = "create"
    GETXATTR = "getxattr"
    SETXATTR = "setxattr"
    LISTXATTR = "listxattr"
    REMOVEXATTR = "removexattr"
    GETLK = "getlk"
    SETLK = "setlk"
    BMAP = "bmap"
    UPDATE_PREPARE = "update_prepare"
    UPDATE_TRANSFER = "update_transfer"


class RequestContext(BaseModel):
    """Identity of the calling process, copied into every request."""

    model_config = ConfigDict(frozen=True)

    uid: int = Field(default=0, ge=0)
    gid: int = Field(default=0, ge=0)
    pid: int = Field(default=0, ge=0)
    unique: int = Field(default=0, ge=0, description="Per-connection request serial")


class MountOptions(BaseModel):
    """Mount-time options handed to bento_init as fc_info."""

    block_size: int = Field(default_factory=lambda: settings.BLOCK_SIZE)
    cache_capacity: int = Field(default_factory=lambda: settings.CACHE_CAPACITY, ge=2)
    commit_interval_ms: Optional[int] = Field(
        default_factory=lambda: settings.COMMIT_INTERVAL_MS,
        description="Background commit timer; None commits only on demand",
    )
    journal_enabled: bool = Field(default=True, description="Test hook: False writes blocks in place unjournaled")
    record_trace: bool = False


class FileAttr(BaseModel):
    """Attributes of one inode as reported to callers."""

    ino: int
    size: int = Field(ge=0)
    blocks: int = Field(ge=0, description="Allocated storage in 512-byte sectors")
    kind: FileKind
    perm: int = Field(ge=0, le=0o7777)
    nlink: int = Field(ge=0)
    uid: int = 0
    gid: int = 0
    atime_ns: int = 0
    mtime_ns: int = 0
    ctime_ns: int = 0

    @property
    def mode(self) -> int:
        """Full st_mode: type bits plus permission bits."""
        return _KIND_MODE_BITS[self.kind] | self.perm


# ---------------------------------------------------------------------------
# Request arguments, one model per opcode
# ---------------------------------------------------------------------------


_URLSAFE = str.maketrans("-_", "+/")


def _from_base64(value):
    """Payload bytes arrive as base64 text (standard or URL-safe) over HTTP."""
    if isinstance(value, str):
        try:
            return base64.b64decode(value.translate(_URLSAFE), validate=True)
        except binascii.Error as e:
            raise ValueError(f"payload is not base64: {e}") from e
    return value


Payload = Annotated[bytes, BeforeValidator(_from_base64)]


class _Args(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_bytes="base64")


class InitArgs(_Args):
    opcode: Literal[Opcode.INIT] = Opcode.INIT
    devname: str = ""
    fc_info: MountOptions = Field(default_factory=MountOptions)


class DestroyArgs(_Args):
    opcode: Literal[Opcode.DESTROY] = Opcode.DESTROY


class LookupArgs(_Args):
    opcode: Literal[Opcode.LOOKUP] = Opcode.LOOKUP
    parent: int
    name: str


class ForgetArgs(_Args):
    opcode: Literal[Opcode.FORGET] = Opcode.FORGET
    ino: int
    nlookup: int = 1


class GetattrArgs(_Args):
    opcode: Literal[Opcode.GETATTR] = Opcode.GETATTR
    ino: int
    fh: Optional[int] = None


class SetattrArgs(_Args):
    opcode: Literal[Opcode.SETATTR] = Opcode.SETATTR
    ino: int
    fh: Optional[int] = None
    mode: Optional[int] = None
    uid: Optional[int] = None
    gid: Optional[int] = None
    size: Optional[int] = Field(default=None, ge=0)
    atime_ns: Optional[int] = None
    mtime_ns: Optional[int] = None


class ReadlinkArgs(_Args):
    opcode: Literal[Opcode.READLINK] = Opcode.READLINK
    ino: int


class MknodArgs(_Args):
    opcode: Literal[Opcode.MKNOD] = Opcode.MKNOD
    parent: int
    name: str
    mode: int = 0o644
    rdev: int = 0


class MkdirArgs(_Args):
    opcode: Literal[Opcode.MKDIR] = Opcode.MKDIR
    parent: int
    name: str
    mode: int = 0o755


class UnlinkArgs(_Args):
    opcode: Literal[Opcode.UNLINK] = Opcode.UNLINK
    parent: int
    name: str


class RmdirArgs(_Args):
    opcode: Literal[Opcode.RMDIR] = Opcode.RMDIR
    parent: int
    name: str


class SymlinkArgs(_Args):
    opcode: Literal[Opcode.SYMLINK] = Opcode.SYMLINK
    parent: int
    name: str
    link: str


class RenameArgs(_Args):
    opcode: Literal[Opcode.RENAME] = Opcode.RENAME
    parent: int
    name: str
    newparent: int
    newname: str
    flags: int = 0


class LinkArgs(_Args):
    opcode: Literal[Opcode.LINK] = Opcode.LINK
    ino: int
    newparent: int
    newname: str


class OpenArgs(_Args):
    opcode: Literal[Opcode.OPEN] = Opcode.OPEN
    ino: int
    flags: int = 0


class ReadArgs(_Args):
    opcode: Literal[Opcode.READ] = Opcode.READ
    ino: int
    fh: int
    offset: int = Field(ge=0)
    size: int = Field(ge=0)


class WriteArgs(_Args):
    opcode: Literal[Opcode.WRITE] = Opcode.WRITE
    ino: int
    fh: int
    offset: int = Field(ge=0)
    data: Payload
    flags: int = 0


class FlushArgs(_Args):
    opcode: Literal[Opcode.FLUSH] = Opcode.FLUSH
    ino: int
    fh: int


class ReleaseArgs(_Args):
    opcode: Literal[Opcode.RELEASE] = Opcode.RELEASE
    ino: int
    fh: int
    flags: int = 0


class FsyncArgs(_Args):
    opcode: Literal[Opcode.FSYNC] = Opcode.FSYNC
    ino: int
    fh: int
    datasync: bool = False


class OpendirArgs(_Args):
    opcode: Literal[Opcode.OPENDIR] = Opcode.OPENDIR
    ino: int
    flags: int = 0


class ReaddirArgs(_Args):
    opcode: Literal[Opcode.READDIR] = Opcode.READDIR
    ino: int
    fh: int
    offset: int = Field(default=0, ge=0)
    size: int = Field(default=4096, gt=0, description="Reply buffer budget in bytes")


class ReleasedirArgs(_Args):
    opcode: Literal[Opcode.RELEASEDIR] = Opcode.RELEASEDIR
    ino: int
    fh: int


class FsyncdirArgs(_Args):
    opcode: Literal[Opcode.FSYNCDIR] = Opcode.FSYNCDIR
    ino: int
    fh: int
    datasync: bool = False


class StatfsArgs(_Args):
    opcode: Literal[Opcode.STATFS] = Opcode.STATFS
    ino: int = 1


class AccessArgs(_Args):
    opcode: Literal[Opcode.ACCESS] = Opcode.ACCESS
    ino: int
    mask: int


class CreateArgs(_Args):
    opcode: Literal[Opcode.CREATE] = Opcode.CREATE
    parent: int
    name: str
    mode: int = 0o644
    flags: int = 0


class GetxattrArgs(_Args):
    opcode: Literal[Opcode.GETXATTR] = Opcode.GETXATTR
    ino: int
    name: str
    size: int = 0


class SetxattrArgs(_Args):
    opcode: Literal[Opcode.SETXATTR] = Opcode.SETXATTR
    ino: int
    name: str
    value: Payload = b""
    flags: int = 0


class ListxattrArgs(_Args):
    opcode: Literal[Opcode.LISTXATTR] = Opcode.LISTXATTR
    ino: int
    size: int = 0


class RemovexattrArgs(_Args):
    opcode: Literal[Opcode.REMOVEXATTR] = Opcode.REMOVEXATTR
    ino: int
    name: str


class GetlkArgs(_Args):
    opcode: Literal[Opcode.GETLK] = Opcode.GETLK
    ino: int
    fh: int


class SetlkArgs(_Args):
    opcode: Literal[Opcode.SETLK] = Opcode.SETLK
    ino: int
    fh: int


class BmapArgs(_Args):
    opcode: Literal[Opcode.BMAP] = Opcode.BMAP
    ino: int
    blocksize: int
    idx: int


class UpdatePrepareArgs(_Args):
    opcode: Literal[Opcode.UPDATE_PREPARE] = Opcode.UPDATE_PREPARE


class UpdateTransferArgs(_Args):
    opcode: Literal[Opcode.UPDATE_TRANSFER] = Opcode.UPDATE_TRANSFER


RequestArgs = Annotated[
    Union[
        InitArgs, DestroyArgs, LookupArgs, ForgetArgs, GetattrArgs, SetattrArgs,
        ReadlinkArgs, MknodArgs, MkdirArgs, UnlinkArgs, RmdirArgs, SymlinkArgs,
        RenameArgs, LinkArgs, OpenArgs, ReadArgs, WriteArgs, FlushArgs, ReleaseArgs,
        FsyncArgs, OpendirArgs, ReaddirArgs, ReleasedirArgs, FsyncdirArgs, StatfsArgs,
        AccessArgs, CreateArgs, GetxattrArgs, SetxattrArgs, ListxattrArgs,
        RemovexattrArgs, GetlkArgs, SetlkArgs, BmapArgs, UpdatePrepareArgs,
        UpdateTransferArgs,
    ],
    Field(discriminator="opcode"),
]


class FsRequest(BaseModel):
    """One File Operations API call. The args model fixes the opcode."""

    model_config = ConfigDict(frozen=True)

    ctx: RequestContext = Field(default_factory=RequestContext)
    args: RequestArgs

    @property
    def opcode(self) -> Opcode:
        return self.args.opcode


# ---------------------------------------------------------------------------
# Replies
# ---------------------------------------------------------------------------


class EntryReply(BaseModel):
    variant: Literal["entry"] = "entry"
    ino: int
    attr: FileAttr
    generation: int = 0


class CreatedReply(BaseModel):
    """create: the new entry plus the handle it was opened with."""

    variant: Literal["created"] = "created"
    ino: int
    attr: FileAttr
    generation: int = 0
    fh: int
    open_flags: int = 0


class AttrReply(BaseModel):
    variant: Literal["attr"] = "attr"
    attr: FileAttr
    ttl: float = 1.0


class DataReply(BaseModel):
    model_config = ConfigDict(ser_json_bytes="base64", val_json_bytes="base64")

    variant: Literal["data"] = "data"
    data: bytes


class WrittenReply(BaseModel):
    variant: Literal["written"] = "written"
    count: int = Field(ge=0)


class OpenReply(BaseModel):
    variant: Literal["open"] = "open"
    fh: int
    open_flags: int = 0


class DirEntry(BaseModel):
    ino: int
    kind: FileKind
    name: str
    next_offset: int


class DirEntriesReply(BaseModel):
    variant: Literal["dir_entries"] = "dir_entries"
    entries: list[DirEntry] = Field(default_factory=list)


class StatfsReply(BaseModel):
    variant: Literal["statfs"] = "statfs"
    blocks: int
    bfree: int
    files: int
    ffree: int
    bsize: int
    namelen: int


class OkReply(BaseModel):
    variant: Literal["ok"] = "ok"


class ErrReply(BaseModel):
    variant: Literal["err"] = "err"
    errno: PositiveInt


FsReply = Annotated[
    Union[
        EntryReply, CreatedReply, AttrReply, DataReply, WrittenReply, OpenReply,
        DirEntriesReply, StatfsReply, OkReply, ErrReply,
    ],
    Field(discriminator="variant"),
]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


class UpgradeReport(BaseModel):
    """Outcome of one live upgrade."""

    fs_name: str
    old_generation: int
    new_generation: int
    pause_ms: float = Field(ge=0, description="Exclusive gate hold time")
    ops_blocked: int = Field(ge=0)
    succeeded: bool = True
    error: Optional[str] = None
    old_variant: str = ""
    new_variant: str = ""


class BenchResult(BaseModel):
    """One row of a benchmark table."""

    workload: str
    threads: int
    opsize: int
    unit: Literal["MB/s", "ops/s"]
    mean: float
    stddev: Optional[float] = None
    runs: int
    ops: int = Field(description="Operations issued per run")
    failures: int = 0
    samples: list[float] = Field(default_factory=list)


class ProvKind(str, Enum):
    CREATE = "Create"
    RENAME = "Rename"
    SYMLINK = "Symlink"
    UNLINK = "Unlink"
    OPEN = "Open"
    CLOSE = "Close"


class RwMode(str, Enum):
    READ = "Read"
    WRITE = "Write"
    READ_WRITE = "ReadWrite"

    @property
    def readable(self) -> bool:
        return self is not RwMode.WRITE

    @property
    def writable(self) -> bool:
        return self is not RwMode.READ


class ProvenanceRecord(BaseModel):
    """One entry of the provenance log."""

    seq: int
    kind: ProvKind
    pid: int
    ino: int
    parent: int = 0
    newparent: int = 0
    name: str = ""
    newname: str = ""
    flags: int = 0
    rw_mode: Optional[RwMode] = None
    deleted: bool = False
    fh: int = 0


class FsckViolation(BaseModel):
    """One broken structural invariant, with the coordinates that expose it."""

    check: Literal["superblock", "blocks", "bitmaps", "nlink", "dirtree", "sizes", "journal"]
    message: str
    ino: Optional[int] = None
    block: Optional[int] = None


class FsckReport(BaseModel):
    violations: list[FsckViolation] = Field(default_factory=list)
    inodes_checked: int = 0
    blocks_checked: int = 0
    orphans: int = Field(default=0, description="Unlinked inodes awaiting cleanup at the next mount")

    @property
    def clean(self) -> bool:
        return not self.violations


# ---------------------------------------------------------------------------
# HTTP surface
# ---------------------------------------------------------------------------


class MountRequest(BaseModel):
    """Request body for mounting an image behind a registered name."""

    name: str = Field(..., min_length=1, max_length=64)
    image: str = Field(..., min_length=1)
    variant: Literal["bentofs", "bentoprov"] = "bentofs"
    options: MountOptions = Field(default_factory=MountOptions)

    @field_validator("name")
    @classmethod
    def validate_name(cls, v: str) -> str:
        v = v.strip()
        if not v or "/" in v:
            raise ValueError("name must be non-empty and contain no '/'")
        return v


class MountResponse(BaseModel):
    name: str
    generation: int
    variant: str


class UpgradeRequest(BaseModel):
    variant: Literal["bentofs", "bentoprov"] = "bentoprov"


class HealthResponse(BaseModel):
    """Health check response."""

    status: str = "healthy"
    version: str = "1.0.0"
    environment: str
    mounts: int = 0


class ErrorResponse(BaseModel):
    """Error response model."""

    detail: str
    code: Optional[str] = None


# ---------------------------------------------------------------------------
# Harness reports
# ---------------------------------------------------------------------------


class CrashFailure(BaseModel):
    """One crash state that broke atomicity, durability or an fsck invariant."""

    workload: str
    crash_point: int = Field(description="Number of trace events applied")
    reason: str
    artifact: Optional[str] = None


class CrashTestSummary(BaseModel):
    workloads: int = 0
    cases: int = 0
    failures: list[CrashFailure] = Field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures


class UpgradeTimeline(BaseModel):
    """Throughput of a load run around a live upgrade, in fixed buckets."""

    load: str
    threads: int
    duration_ms: int
    at_ms: int
    bucket_ms: int
    buckets: list[int] = Field(default_factory=list)
    upgrade_at_ms: Optional[float] = None
    report: Optional[UpgradeReport] = None
    ops_total: int = 0
    ops_failed: int = 0
    rate_before: float = Field(default=0.0, description="ops/s before the upgrade")
    rate_after: float = Field(default=0.0, description="ops/s after the upgrade")

    @property
    def upgraded(self) -> bool:
        return self.report is not None and self.report.succeeded

    def gaps(self) -> list[tuple[int, int]]:
        """Runs of empty buckets as inclusive (first, last) indexes."""
        out = []
        start = None
        for i, count in enumerate(self.buckets):
            if count == 0 and start is None:
                start = i
            elif count and start is not None:
                out.append((start, i - 1))
                start = None
        if start is not None:
            out.append((start, len(self.buckets) - 1))
        return out
