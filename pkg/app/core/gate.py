"""Quiescence gate guarding a connection's file-system instance."""

import logging
import threading
from contextlib import contextmanager
from typing import Iterator

from readerwriterlock import rwlock

logger = logging.getLogger(__name__)


class GateViolation(AssertionError):
    """An exclusive holder found operations still running inside the instance."""


class QuiescenceGate:
    """
    Reader-writer gate: dispatches hold it shared, upgrade and unregister
    hold it exclusively.

    Writer-preferring: once an exclusive holder is waiting, new shared
    acquisitions queue behind it, so an upgrade cannot be starved.
    """

    def __init__(self):
        self._lock = rwlock.RWLockWrite()
        self._state = threading.Lock()
        self._inflight = 0
        self._exclusive_pending = 0
        self._blocked = 0

    @property
    def inflight(self) -> int:
        """Operations currently executing inside the instance."""
        with self._state:
            return self._inflight

    @property
    def blocked(self) -> int:
        """Shared acquisitions that arrived while an exclusive holder was pending or active."""
        with self._state:
            return self._blocked

    @contextmanager
    def shared(self) -> Iterator[None]:
        with self._state:
            if self._exclusive_pending:
                self._blocked += 1
        reader = self._lock.gen_rlock()
        with reader:
            with self._state:
                self._inflight += 1
            try:
                yield
            finally:
                with self._state:
                    self._inflight -= 1

    @contextmanager
    def exclusive(self) -> Iterator[None]:
        with self._state:
            self._exclusive_pending += 1
        writer = self._lock.gen_wlock()
        writer.acquire()
        try:
            with self._state:
                inflight = self._inflight
            if inflight != 0:
                logger.error("exclusive gate acquired with %d operations in flight", inflight)
                raise GateViolation(f"{inflight} operations in flight under exclusive gate")
            yield
        finally:
            with self._state:
                self._exclusive_pending -= 1
            writer.release()
