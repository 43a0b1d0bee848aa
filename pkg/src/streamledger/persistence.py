"""Batched append-only files with flush-on-read and torn-tail recovery.

An :class:`AppendLog` accepts records into an in-memory tail and writes them
out from a background thread once ``flush_bytes`` have accumulated or
``flush_timeout_ms`` has elapsed since the first unflushed append. Any read
that touches the unflushed tail forces a synchronous flush first, so readers
always see what was appended.
"""
from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .ledger import RECORD_HEADER_LEN, iter_frames

log = logging.getLogger(__name__)

FSYNC_PER_FLUSH = "per-flush"
FSYNC_NEVER = "never"


class PersistenceError(RuntimeError):
    """The log can no longer accept writes; the owner must stop."""


@dataclass(frozen=True)
class BatcherConfig:
    flush_bytes: int = 64 * 1024
    flush_timeout_ms: float = 100.0
    fsync_policy: str = FSYNC_PER_FLUSH

    def __post_init__(self) -> None:
        if self.flush_bytes <= 0:
            raise ValueError("flush_bytes must be positive")
        if self.flush_timeout_ms <= 0:
            raise ValueError("flush_timeout_ms must be positive")
        if self.fsync_policy not in (FSYNC_PER_FLUSH, FSYNC_NEVER):
            raise ValueError(f"unknown fsync policy {self.fsync_policy!r}")


@dataclass
class FlushMetrics:
    flushes: int = 0
    fsyncs: int = 0
    bytes: int = 0
    max_latency_s: float = 0.0
    latencies_s: list[float] = field(default_factory=list, repr=False)


def recover(path: str | os.PathLike, min_record_len: int = RECORD_HEADER_LEN,
            truncate: bool = True) -> tuple[int, list[bytes]]:
    """Scan a framed file and drop any torn tail.

    Returns the length of the longest prefix made of complete frames and the
    frames themselves. With ``truncate`` the file is cut back to that prefix.
    """
    p = Path(path)
    if not p.exists():
        return 0, []
    data = p.read_bytes()
    frames = [f for _, f in iter_frames(data, min_record_len)]
    valid = sum(len(f) for f in frames)
    if truncate and valid != len(data):
        log.warning("%s: truncating torn tail (%d -> %d bytes)", p, len(data), valid)
        with open(p, "r+b") as fh:
            fh.truncate(valid)
            fh.flush()
            os.fsync(fh.fileno())
    return valid, frames


class AppendLog:
    """Append-only file with an asynchronous size/timeout-triggered batcher."""

    def __init__(self, path: str | os.PathLike, config: BatcherConfig | None = None,
                 on_error: Callable[[BaseException], None] | None = None,
                 min_record_len: int = RECORD_HEADER_LEN) -> None:
        self.path = Path(path)
        self.config = config or BatcherConfig()
        self.on_error = on_error
        self.metrics = FlushMetrics()

        self.path.parent.mkdir(parents=True, exist_ok=True)
        valid, _ = recover(self.path, min_record_len)
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        self._durable = valid
        self._logical = valid
        self._buf = bytearray()
        self._deadline: float | None = None
        self._failed: BaseException | None = None
        self._closed = False

        self._cond = threading.Condition()
        self._io_lock = threading.Lock()
        self._flusher = threading.Thread(target=self._run_flusher, name=f"flush:{self.path.name}",
                                         daemon=True)
        self._flusher.start()

    # -- properties ------------------------------------------------------------

    @property
    def durable_length(self) -> int:
        return self._durable

    @property
    def logical_length(self) -> int:
        return self._logical

    @property
    def failed(self) -> BaseException | None:
        return self._failed

    # -- writes ----------------------------------------------------------------

    def buffered_append(self, record: bytes) -> int:
        """Queue ``record``; returns its logical offset. Durability is deferred."""
        with self._cond:
            if self._failed is not None:
                raise PersistenceError(f"{self.path}: log halted") from self._failed
            if self._closed:
                raise PersistenceError(f"{self.path}: log closed")
            offset = self._logical
            self._buf += record
            self._logical += len(record)
            if self._deadline is None:
                self._deadline = time.monotonic() + self.config.flush_timeout_ms / 1000.0
            if len(self._buf) >= self.config.flush_bytes:
                self._cond.notify()
            elif len(self._buf) == len(record):
                self._cond.notify()  # re-arm the flusher's timer
            return offset

    append = buffered_append

    def flush(self, fsync: bool | None = None) -> int:
        """Write out the buffered tail synchronously; returns the durable length."""
        do_fsync = self.config.fsync_policy == FSYNC_PER_FLUSH if fsync is None else fsync
        with self._io_lock:
            with self._cond:
                if self._failed is not None:
                    raise PersistenceError(f"{self.path}: log halted") from self._failed
                if not self._buf:
                    return self._durable
                data = bytes(self._buf)
                self._buf.clear()
                self._deadline = None
                base = self._durable
            t0 = time.perf_counter()
            try:
                view = memoryview(data)
                written = 0
                while written < len(data):
                    written += os.pwrite(self._fd, view[written:], base + written)
                if do_fsync:
                    os.fsync(self._fd)
            except OSError as exc:
                self._fail(exc)
                raise PersistenceError(f"{self.path}: flush failed: {exc}") from exc
            dt = time.perf_counter() - t0
            with self._cond:
                self._durable = base + len(data)
                m = self.metrics
                m.flushes += 1
                m.fsyncs += 1 if do_fsync else 0
                m.bytes += len(data)
                m.max_latency_s = max(m.max_latency_s, dt)
                if len(m.latencies_s) < 100_000:
                    m.latencies_s.append(dt)
                return self._durable

    def sync(self) -> int:
        """Flush with the configured fsync policy (the per-block durability point)."""
        return self.flush()

    def truncate(self, length: int) -> None:
        """Cut the log back to ``length`` logical bytes (used by log repair)."""
        with self._io_lock:
            with self._cond:
                if length > self._logical:
                    raise ValueError("cannot truncate beyond logical length")
                if length >= self._durable:
                    keep = length - self._durable
                    del self._buf[keep:]
                    self._logical = length
                    if not self._buf:
                        self._deadline = None
                    return
                self._buf.clear()
                self._deadline = None
                self._durable = self._logical = length
            os.ftruncate(self._fd, length)
            if self.config.fsync_policy == FSYNC_PER_FLUSH:
                os.fsync(self._fd)

    # -- reads -----------------------------------------------------------------

    def read_at(self, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0 or offset + length > self._logical:
            raise IndexError(f"read [{offset}, {offset + length}) beyond logical length {self._logical}")
        if offset + length > self._durable:
            self.flush()
        out = os.pread(self._fd, length, offset)
        if len(out) != length:
            raise PersistenceError(f"{self.path}: short read at {offset}")
        return out

    def read_all(self) -> bytes:
        return self.read_at(0, self._logical)

    # -- lifecycle -------------------------------------------------------------

    def close(self) -> None:
        """Clean shutdown: flush everything, then release the file."""
        if self._closed:
            return
        try:
            if self._failed is None:
                self.flush()
        finally:
            self._stop()

    def crash(self) -> None:
        """Simulate a process crash: the unflushed tail is lost."""
        with self._cond:
            self._buf.clear()
            self._logical = self._durable
        self._stop()

    def _stop(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        if threading.current_thread() is not self._flusher:
            self._flusher.join(timeout=5)
        with self._io_lock:
            if self._fd >= 0:
                os.close(self._fd)
                self._fd = -1

    def _fail(self, exc: BaseException) -> None:
        with self._cond:
            if self._failed is None:
                self._failed = exc
        log.error("%s: persistence failure, halting: %s", self.path, exc)
        if self.on_error is not None:
            self.on_error(exc)

    def _run_flusher(self) -> None:
        cfg = self.config
        while True:
            with self._cond:
                while not self._closed:
                    if self._buf:
                        if len(self._buf) >= cfg.flush_bytes:
                            break
                        remaining = (self._deadline or 0.0) - time.monotonic()
                        if remaining <= 0:
                            break
                        self._cond.wait(remaining)
                    else:
                        self._cond.wait()
                if self._closed:
                    return
            try:
                self.flush()
            except PersistenceError:
                return

    def __enter__(self) -> "AppendLog":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
