"""Replicated-log storage for an ordering node.

Entries are stored with the ledger record frame: the seq field holds the log
index, the hash field holds SHA256(payload), and the body is
``[u64 term][payload]``. Term and vote live in a small side file that is
replaced atomically on every change.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

from ..ledger import LedgerRecord, decode_record, encode_record, iter_frames
from ..persistence import AppendLog, BatcherConfig

_TERM = struct.Struct("<Q")


@dataclass(frozen=True, slots=True)
class LogEntry:
    term: int
    payload: bytes
    payload_hash: bytes


def payload_hash(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()


class RaftLog:
    def __init__(self, data_dir: str | os.PathLike, batcher: BatcherConfig | None = None,
                 on_error=None) -> None:
        self.dir = Path(data_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._meta_path = self.dir / "meta.json"
        self._file = AppendLog(self.dir / "orderer.log", batcher, on_error=on_error)
        self.entries: list[LogEntry] = []
        self._offsets: list[int] = []
        self._first: dict[bytes, int] = {}  # payload hash -> lowest index holding it
        pos = 0
        for raw in self._frames():
            rec = decode_record(raw)
            if rec.seq != len(self.entries) + 1:
                break
            (term,) = _TERM.unpack_from(rec.tx_bytes)
            body = rec.tx_bytes[_TERM.size:]
            self.entries.append(LogEntry(term, body, rec.chain_hash))
            self._first.setdefault(rec.chain_hash, len(self.entries))
            self._offsets.append(pos)
            pos += len(raw)
        if pos != self._file.logical_length:
            self._file.truncate(pos)
        self.current_term, self.voted_for = self._load_meta()

    def _frames(self):
        data = self._file.read_all()
        for _, frame in iter_frames(data):
            yield frame

    # -- term / vote -----------------------------------------------------------

    def _load_meta(self) -> tuple[int, int | None]:
        if not self._meta_path.exists():
            return 0, None
        meta = json.loads(self._meta_path.read_text())
        return int(meta["term"]), meta.get("voted_for")

    def save_meta(self, term: int, voted_for: int | None) -> None:
        self.current_term, self.voted_for = term, voted_for
        tmp = self._meta_path.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            json.dump({"term": term, "voted_for": voted_for}, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._meta_path)

    # -- entries ---------------------------------------------------------------

    @property
    def last_index(self) -> int:
        return len(self.entries)

    @property
    def last_term(self) -> int:
        return self.entries[-1].term if self.entries else 0

    def term_at(self, index: int) -> int:
        if index == 0:
            return 0
        return self.entries[index - 1].term

    def entry(self, index: int) -> LogEntry:
        return self.entries[index - 1]

    def append(self, term: int, payload: bytes) -> int:
        h = payload_hash(payload)
        index = len(self.entries) + 1
        frame = encode_record(LedgerRecord(index, True, h, _TERM.pack(term) + payload))
        self._offsets.append(self._file.buffered_append(frame))
        self.entries.append(LogEntry(term, payload, h))
        self._first.setdefault(h, index)
        return index

    def find(self, h: bytes) -> int | None:
        """Lowest index whose payload hashes to ``h``."""
        return self._first.get(h)

    def truncate_from(self, index: int) -> None:
        """Drop entries ``index..last``; only ever called on uncommitted suffixes."""
        if index > len(self.entries):
            return
        self._file.truncate(self._offsets[index - 1])
        del self.entries[index - 1:]
        del self._offsets[index - 1:]
        self._first = {h: i for h, i in self._first.items() if i < index}

    def sync(self) -> None:
        self._file.sync()

    @property
    def flush_metrics(self):
        return self._file.metrics

    def close(self) -> None:
        self._file.close()

    def crash(self) -> None:
        self._file.crash()
