"""Errno-carrying error raised by file-system handlers."""

import errno as _errno
import os


class FsError(Exception):
    """A POSIX error answered to the caller as ErrReply(errno)."""

    def __init__(self, errno: int, detail: str = ""):
        if errno <= 0:
            raise ValueError(f"errno must be positive, got {errno}")
        self.errno = errno
        self.detail = detail
        super().__init__(f"{errno_name(errno)}: {detail}" if detail else errno_name(errno))


def errno_name(code: int) -> str:
    """Symbolic name for an errno value (ENOENT, ...)."""
    return _errno.errorcode.get(code, str(code))


def errno_message(code: int) -> str:
    """Human-readable message for an errno value."""
    return os.strerror(code)
