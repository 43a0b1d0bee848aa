"""Client side of the ordering interface: order, get, get_last and delivery streams."""
from __future__ import annotations

import logging
import select
import threading
import time
from typing import Iterator

from . import wire
from .raft import NotFound
from .wire import Block, Conn, ConnectionClosed, Msg, OrderedEntry

log = logging.getLogger(__name__)


class OrderingTimeout(TimeoutError):
    """No quorum reachable before the deadline."""


class OrderingRejected(ValueError):
    pass


class OrdererClient:
    """Request/response connection to an ordering cluster.

    One instance serializes its own requests; give each client thread its own
    instance. Leader redirects and node failures are retried until ``timeout``.
    """

    def __init__(self, endpoints: list[tuple[str, int]], timeout: float = 10.0) -> None:
        if not endpoints:
            raise ValueError("no orderer endpoints")
        self.endpoints = [tuple(e) for e in endpoints]
        self.timeout = timeout
        self._target = 0
        self._conn: Conn | None = None
        self._lock = threading.Lock()

    def close(self) -> None:
        with self._lock:
            self._drop()

    def _drop(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def _connection(self, deadline: float) -> Conn:
        if self._conn is None:
            remaining = max(0.05, min(1.0, deadline - time.monotonic()))
            self._conn = Conn.connect(self.endpoints[self._target], timeout=remaining)
        return self._conn

    def _rotate(self, hint: int = -1) -> None:
        self._drop()
        if 0 <= hint < len(self.endpoints) and hint != self._target:
            self._target = hint
        else:
            self._target = (self._target + 1) % len(self.endpoints)

    def _call(self, kind: int, body: bytes, expect: int, deadline: float) -> bytes:
        conn = self._connection(deadline)
        conn.sock.settimeout(max(0.05, deadline - time.monotonic()))
        conn.send(kind, body)
        rkind, resp = conn.recv()
        if rkind != expect:
            raise ConnectionClosed(f"unexpected reply type {rkind}")
        return resp

    def order(self, payload: bytes) -> int:
        """Submit ``payload``; returns its sequence number once committed on a majority."""
        if not payload:
            raise OrderingRejected("payload must be non-empty")
        deadline = time.monotonic() + self.timeout
        with self._lock:
            while time.monotonic() < deadline:
                try:
                    resp = self._call(Msg.SUBMIT, payload, Msg.SUBMIT_ACK, deadline)
                except (ConnectionClosed, OSError):
                    self._rotate()
                    time.sleep(0.02)
                    continue
                seq, status, hint = wire.unpack_submit_ack(resp)
                if status == wire.ACK_OK:
                    return seq
                if status == wire.ACK_REJECTED:
                    raise OrderingRejected("orderer rejected payload")
                self._rotate(hint)
                if hint < 0:
                    time.sleep(0.05)  # election in progress
            raise OrderingTimeout("no ordering quorum before deadline")

    def _fetch(self, seq: int, kind: int) -> OrderedEntry | None:
        deadline = time.monotonic() + self.timeout
        with self._lock:
            while time.monotonic() < deadline:
                try:
                    resp = self._call(Msg.FETCH, wire.pack_fetch(seq, kind), Msg.DELIVER, deadline)
                except (ConnectionClosed, OSError):
                    self._rotate()
                    time.sleep(0.02)
                    continue
                dkind, value = wire.unpack_deliver(resp)
                if dkind == wire.DELIVER_ENTRY:
                    return value
                return None
            raise OrderingTimeout("no orderer reachable")

    def get(self, seq: int) -> OrderedEntry:
        entry = self._fetch(seq, wire.FETCH_GET)
        if entry is None:
            raise NotFound(seq)
        return entry

    def get_last(self) -> tuple[int, OrderedEntry] | None:
        """Highest committed entry as ``(seq, entry)``, or ``None`` for an empty log."""
        entry = self._fetch(0, wire.FETCH_LAST)
        return None if entry is None else (entry.seq, entry)


def deliver_stream(endpoints: list[tuple[str, int]], from_seq: int = 1, blocks: bool = False,
                   stop: threading.Event | None = None,
                   retry_timeout: float = 10.0) -> Iterator[OrderedEntry | Block]:
    """Yield committed entries (or blocks) in seq order starting at ``from_seq``.

    Reconnects to another node on failure and resumes after the last seq seen,
    so every seq is delivered exactly once. In block mode a block that overlaps
    already-delivered seqs is trimmed.
    """
    stop = stop or threading.Event()
    next_seq = max(1, from_seq)
    target = 0
    down_since: float | None = None
    while not stop.is_set():
        try:
            conn = Conn.connect(endpoints[target], timeout=1.0)
        except OSError:
            conn = None
        if conn is None:
            down_since = down_since or time.monotonic()
            if time.monotonic() - down_since > retry_timeout:
                raise OrderingTimeout("no orderer reachable for delivery")
            target = (target + 1) % len(endpoints)
            time.sleep(0.05)
            continue
        down_since = None
        try:
            conn.send(Msg.FETCH, wire.pack_fetch(next_seq, wire.FETCH_BLOCKS if blocks else wire.FETCH_STREAM))
            while not stop.is_set():
                readable, _, _ = select.select([conn.sock], [], [], 0.5)
                if not readable:
                    continue
                kind, body = conn.recv()
                if kind != Msg.DELIVER:
                    raise ConnectionClosed(f"unexpected message {kind}")
                dkind, value = wire.unpack_deliver(body)
                if dkind == wire.DELIVER_ENTRY:
                    if value.seq != next_seq:
                        if value.seq < next_seq:
                            continue
                        raise ConnectionClosed(f"gap in delivery: {value.seq} != {next_seq}")
                    next_seq += 1
                    yield value
                elif dkind == wire.DELIVER_BLOCK:
                    fresh = tuple(e for e in value.entries if e.seq >= next_seq)
                    if not fresh:
                        continue
                    if fresh[0].seq != next_seq:
                        raise ConnectionClosed(f"gap in block delivery at {next_seq}")
                    next_seq = fresh[-1].seq + 1
                    yield value if len(fresh) == len(value.entries) else Block(value.block_no, fresh, value.cut_reason)
                elif dkind == wire.DELIVER_RESTART:
                    next_seq = value
        except (ConnectionClosed, OSError) as exc:
            log.debug("delivery from %s interrupted: %s", endpoints[target], exc)
            target = (target + 1) % len(endpoints)
        finally:
            conn.close()
