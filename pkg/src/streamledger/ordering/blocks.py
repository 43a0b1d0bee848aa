"""Block cutting for the batching baseline.

Committed entries accumulate until ``block_size`` are pending or the oldest
has waited ``block_timeout``. Every cut block is recorded in a block index
file and made durable before it is published, mirroring an orderer that
writes each block to disk.
"""
from __future__ import annotations

import hashlib
import logging
import queue
import struct
import threading
import time
from pathlib import Path
from typing import Callable

from ..ledger import LedgerRecord, encode_record
from ..persistence import AppendLog, BatcherConfig
from .wire import Block, OrderedEntry

log = logging.getLogger(__name__)

_BLOCK_BODY = struct.Struct("<QI")


def cut_reason(pending: int, oldest_age: float, block_size: int, block_timeout: float) -> str | None:
    """Why the pending batch should be cut now, or ``None`` to keep waiting."""
    if pending >= block_size:
        return "size"
    if pending and oldest_age >= block_timeout:
        return "timeout"
    return None


def cut_block(pending: list[OrderedEntry], block_no: int, block_size: int,
              reason: str) -> tuple[Block, list[OrderedEntry]]:
    """Cut the next block off ``pending``; returns the block and what is left over."""
    take = pending[:block_size]
    return Block(block_no, tuple(take), reason), pending[block_size:]


class BlockCutter:
    def __init__(self, block_size: int, block_timeout_s: float,
                 on_block: Callable[[Block], None], store_path: str | Path | None = None,
                 batcher: BatcherConfig | None = None) -> None:
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.block_size = block_size
        self.block_timeout_s = block_timeout_s
        self.on_block = on_block
        self._store = None
        if store_path is not None:
            Path(store_path).unlink(missing_ok=True)  # derived data; rebuilt each run
            self._store = AppendLog(store_path, batcher)
        self._q: queue.SimpleQueue[OrderedEntry | None] = queue.SimpleQueue()
        self._next_block = 1
        self._running = True
        self._thread = threading.Thread(target=self._run, name="block-cutter", daemon=True)
        self._thread.start()

    def add(self, entry: OrderedEntry) -> None:
        self._q.put(entry)

    def _publish(self, block: Block) -> None:
        if self._store is not None:
            digest = hashlib.sha256(b"".join(e.payload_hash for e in block.entries)).digest()
            body = _BLOCK_BODY.pack(block.entries[0].seq, len(block.entries))
            self._store.buffered_append(encode_record(LedgerRecord(block.block_no, True, digest, body)))
            self._store.sync()
        self.on_block(block)

    def _run(self) -> None:
        pending: list[OrderedEntry] = []
        oldest = 0.0
        while self._running:
            timeout = None
            if pending:
                timeout = max(0.0, oldest + self.block_timeout_s - time.monotonic())
            try:
                item = self._q.get(timeout=timeout)
            except queue.Empty:
                item = ...
            if item is None:
                return
            if item is not ...:
                if not pending:
                    oldest = time.monotonic()
                pending.append(item)
                # drain whatever else is already queued
                while len(pending) < self.block_size:
                    try:
                        nxt = self._q.get_nowait()
                    except queue.Empty:
                        break
                    if nxt is None:
                        return
                    pending.append(nxt)
            reason = cut_reason(len(pending), time.monotonic() - oldest, self.block_size,
                                self.block_timeout_s)
            while reason is not None:
                block, pending = cut_block(pending, self._next_block, self.block_size, reason)
                self._next_block += 1
                try:
                    self._publish(block)
                except Exception:  # pragma: no cover - surfaced via logs
                    log.exception("failed to publish block %d", block.block_no)
                oldest = time.monotonic()
                reason = "size" if len(pending) >= self.block_size else None

    def close(self) -> None:
        self._running = False
        self._q.put(None)
        self._thread.join(timeout=5)
        if self._store is not None:
            self._store.close()

    def crash(self) -> None:
        self._running = False
        self._q.put(None)
        if self._store is not None:
            self._store.crash()
