"""In-memory versioned key-value store guarded by lock stripes.

Many endorsement threads read concurrently while exactly one committer
applies write sets. Keys hash to one of ``stripe_count`` reader-writer locks;
the committer write-locks only the stripes a write set touches, always in
ascending stripe order so it can never deadlock with a reader that walks
stripes in the same order.
"""
from __future__ import annotations

import os
import struct
import tempfile
import threading
import zlib
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .ledger import Key, encode_state_entry, state_digest

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class RWLock:
    """Writer-preferring reader-writer lock."""

    def __init__(self) -> None:
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False
        self._writers_waiting = 0

    def acquire_read(self) -> None:
        with self._cond:
            while self._writer or self._writers_waiting:
                self._cond.wait()
            self._readers += 1

    def release_read(self) -> None:
        with self._cond:
            self._readers -= 1
            if self._readers == 0:
                self._cond.notify_all()

    def acquire_write(self) -> None:
        with self._cond:
            self._writers_waiting += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._writers_waiting -= 1
            self._writer = True

    def release_write(self) -> None:
        with self._cond:
            self._writer = False
            self._cond.notify_all()

    @contextmanager
    def read(self) -> Iterator[None]:
        self.acquire_read()
        try:
            yield
        finally:
            self.release_read()

    @contextmanager
    def write(self) -> Iterator[None]:
        self.acquire_write()
        try:
            yield
        finally:
            self.release_write()


@dataclass(frozen=True, slots=True)
class StateEntry:
    value: bytes
    version: int


_NS_CRC: dict[str, int] = {}


def stripe_hash(key: Key) -> int:
    seed = _NS_CRC.get(key.namespace)
    if seed is None:
        seed = _NS_CRC[key.namespace] = zlib.crc32(key.namespace.encode())
    return zlib.crc32(key.name, seed)


class StateDB:
    def __init__(self, stripe_count: int = 64) -> None:
        if stripe_count <= 0 or stripe_count & (stripe_count - 1):
            raise ValueError("stripe_count must be a positive power of two")
        self.stripe_count = stripe_count
        self._mask = stripe_count - 1
        self._locks = [RWLock() for _ in range(stripe_count)]
        self._shards: list[dict[Key, StateEntry]] = [{} for _ in range(stripe_count)]
        self._commit_mutex = threading.Lock()
        self.last_applied_seq = 0

    def stripe_for(self, key: Key) -> int:
        return stripe_hash(key) & self._mask

    # -- reads -----------------------------------------------------------------

    def get(self, key: Key) -> StateEntry | None:
        idx = stripe_hash(key) & self._mask
        with self._locks[idx].read():
            return self._shards[idx].get(key)

    def version_of(self, key: Key) -> int:
        entry = self.get(key)
        return entry.version if entry is not None else 0

    def snapshot_read(self, keys: Iterable[Key]) -> list[tuple[Key, int, bytes | None]]:
        """Read ``keys`` one stripe at a time, stripes in ascending order."""
        by_stripe: dict[int, list[Key]] = defaultdict(list)
        ordered = list(keys)
        for k in ordered:
            by_stripe[stripe_hash(k) & self._mask].append(k)
        found: dict[Key, StateEntry | None] = {}
        for idx in sorted(by_stripe):
            shard = self._shards[idx]
            with self._locks[idx].read():
                for k in by_stripe[idx]:
                    found[k] = shard.get(k)
        out = []
        for k in ordered:
            e = found[k]
            out.append((k, 0, None) if e is None else (k, e.version, e.value))
        return out

    def mvcc_check(self, reads: Sequence[tuple[Key, int]]) -> bool:
        # Called from the single committer; no write can race these reads.
        shards, mask = self._shards, self._mask
        for key, version in reads:
            e = shards[stripe_hash(key) & mask].get(key)
            if (e.version if e is not None else 0) != version:
                return False
        return True

    # -- writes ----------------------------------------------------------------

    def apply_writes(self, writes: Sequence[tuple[Key, bytes | None]], commit_seq: int) -> None:
        """Apply a write set. The caller must hold write locks on every touched stripe."""
        shards, mask = self._shards, self._mask
        for key, value in writes:
            shard = shards[stripe_hash(key) & mask]
            if __debug__:
                cur = shard.get(key)
                assert cur is None or cur.version < commit_seq, (
                    f"version regression on {key}: {cur.version} -> {commit_seq}")
            if value is None:
                shard.pop(key, None)
            else:
                shard[key] = StateEntry(value, commit_seq)

    def commit(self, writes: Sequence[tuple[Key, bytes | None]], commit_seq: int) -> None:
        """Lock touched stripes in ascending order, apply, and advance ``last_applied_seq``."""
        if len(writes) == 1:
            touched = [stripe_hash(writes[0][0]) & self._mask]
        else:
            touched = sorted({stripe_hash(k) & self._mask for k, _ in writes})
        with self._commit_mutex:
            for idx in touched:
                self._locks[idx].acquire_write()
            try:
                self.apply_writes(writes, commit_seq)
            finally:
                for idx in reversed(touched):
                    self._locks[idx].release_write()
            self.last_applied_seq = commit_seq

    def mark_applied(self, seq: int) -> None:
        """Record that ``seq`` was processed without state changes (invalid or read-only)."""
        with self._commit_mutex:
            self.last_applied_seq = seq

    # -- whole-store views -------------------------------------------------------

    def snapshot_all(self) -> tuple[int, list[tuple[Key, int, bytes]]]:
        """Consistent copy of the whole store and the seq it reflects."""
        with self._commit_mutex:
            seq = self.last_applied_seq
            entries = [(k, e.version, e.value) for shard in self._shards for k, e in shard.items()]
        return seq, entries

    def items(self) -> list[tuple[Key, int, bytes]]:
        return self.snapshot_all()[1]

    def __len__(self) -> int:
        return sum(len(s) for s in self._shards)

    def digest(self) -> str:
        return state_digest(self.items())

    # -- checkpoints -----------------------------------------------------------

    def write_checkpoint(self, path: str | os.PathLike) -> int:
        """Atomically write ``[u64 last_applied_seq]`` + entry frames; returns the seq."""
        seq, entries = self.snapshot_all()
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=target.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(_U64.pack(seq))
                for key, version, value in sorted(entries, key=lambda e: e[0]):
                    fh.write(encode_state_entry(key, version, value))
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return seq

    @classmethod
    def load_checkpoint(cls, path: str | os.PathLike, stripe_count: int = 64) -> "StateDB":
        data = Path(path).read_bytes()
        db = cls(stripe_count)
        (seq,) = _U64.unpack_from(data, 0)
        pos = 8
        while pos < len(data):
            (klen,) = _U32.unpack_from(data, pos)
            pos += 4
            key = Key.from_bytes(data[pos:pos + klen])
            pos += klen
            (version,) = _U64.unpack_from(data, pos)
            pos += 8
            (vlen,) = _U32.unpack_from(data, pos)
            pos += 4
            value = data[pos:pos + vlen]
            pos += vlen
            db._shards[db.stripe_for(key)][key] = StateEntry(value, version)
        db.last_applied_seq = seq
        return db
