"""The validating peer's commit pipeline.

Stream mode::

    intake (deserialize, cache) -> stage 1: signature workers
        -> reorder buffer (released strictly in seq order)
        -> stage 2: single committer (MVCC check, state commit, ledger append)
        -> stage 3: housekeeping (waiters, subscribers, metrics, checkpoints)

Block mode verifies signatures in parallel only within one block, commits the
block's transactions one by one and makes the ledger durable once per block
before any of its events are released.
"""
from __future__ import annotations

import logging
import queue
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .ledger import (
    GENESIS_HASH,
    LedgerRecord,
    MalformedTransaction,
    Transaction,
    chain_hash_fn,
    decode_record,
    deserialize_tx,
    encode_record,
    iter_frames,
)
from .ordering.wire import Block, OrderedEntry
from .persistence import AppendLog, BatcherConfig, PersistenceError
from .statedb import StateDB

log = logging.getLogger(__name__)

STREAM, BLOCK = "stream", "block"
NULL_TX_ID = bytes(16)


@dataclass(frozen=True)
class PipelineConfig:
    sig_workers: int = 6
    queue_capacity: int = 256
    mode: str = STREAM
    cache: bool = True
    cache_capacity: int = 8192
    stage3_capacity: int = 4096

    def __post_init__(self) -> None:
        if not 1 <= self.sig_workers <= 32:
            raise ValueError("sig_workers must be in 1..32")
        if self.queue_capacity < self.sig_workers:
            raise ValueError("queue_capacity must be >= sig_workers")
        if self.mode not in (STREAM, BLOCK):
            raise ValueError(f"unknown pipeline mode {self.mode!r}")
        if self.stage3_capacity < 1 or self.cache_capacity < 1:
            raise ValueError("capacities must be positive")


@dataclass(frozen=True, slots=True)
class CommitEvent:
    seq: int
    tx_id: bytes
    valid: bool
    received_ns: int
    verified_ns: int
    committed_ns: int


class DeserCache:
    """Bounded map from payload hash to deserialized transaction.

    Only the intake thread touches it, so there is no locking.
    """

    def __init__(self, capacity: int = 8192) -> None:
        self.capacity = capacity
        self._map: OrderedDict[bytes, Transaction | None] = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._map)

    def get(self, payload: bytes, payload_hash: bytes) -> Transaction | None:
        """Deserialized transaction, or ``None`` if the payload is malformed."""
        try:
            tx = self._map[payload_hash]
        except KeyError:
            pass
        else:
            self.hits += 1
            return tx
        self.misses += 1
        tx = _try_deserialize(payload)
        self._map[payload_hash] = tx
        if len(self._map) > self.capacity:
            self._map.popitem(last=False)
        return tx


def _try_deserialize(payload: bytes) -> Transaction | None:
    try:
        return deserialize_tx(payload)
    except (MalformedTransaction, ValueError):
        return None


class LedgerWriter:
    """Appends hash-chained records to ``ledger.dat`` through the batcher."""

    def __init__(self, path: str | Path, batcher: BatcherConfig | None = None,
                 on_error: Callable[[BaseException], None] | None = None) -> None:
        self.log = AppendLog(path, batcher, on_error=on_error)
        self.last_seq = 0
        self.last_hash = GENESIS_HASH

    def load(self) -> list[LedgerRecord]:
        """Decode the recovered file; stops at the first record that breaks the chain."""
        records = []
        prev, pos = GENESIS_HASH, 0
        for _, frame in iter_frames(self.log.read_all()):
            rec = decode_record(frame)
            if rec.seq != len(records) + 1 or rec.chain_hash != chain_hash_fn(prev, rec.tx_bytes):
                log.error("ledger chain broken at record %d; discarding suffix", rec.seq)
                break
            records.append(rec)
            prev = rec.chain_hash
            pos += len(frame)
        if pos != self.log.logical_length:
            self.log.truncate(pos)
        self.last_seq = len(records)
        self.last_hash = prev
        return records

    def append(self, seq: int, valid: bool, payload: bytes) -> bytes:
        if seq != self.last_seq + 1:
            raise PersistenceError(f"ledger seq gap: expected {self.last_seq + 1}, got {seq}")
        h = chain_hash_fn(self.last_hash, payload)
        self.log.buffered_append(encode_record(LedgerRecord(seq, valid, h, payload)))
        self.last_seq, self.last_hash = seq, h
        return h

    def sync(self) -> None:
        self.log.sync()

    def close(self) -> None:
        self.log.close()

    def crash(self) -> None:
        self.log.crash()


@dataclass
class PipelineMetrics:
    received: int = 0
    committed: int = 0
    valid: int = 0
    invalid: int = 0
    duplicates: int = 0
    stage3_backpressure: int = 0
    lagging_subscribers: int = 0
    blocks: int = 0
    block_syncs: int = 0


class Waiter:
    """Resolved by the housekeeping stage when its transaction commits."""

    __slots__ = ("_event", "result")

    def __init__(self) -> None:
        self._event = threading.Event()
        self.result: CommitEvent | BaseException | None = None

    def resolve(self, result) -> None:
        self.result = result
        self._event.set()

    def wait(self, timeout: float | None = None) -> CommitEvent:
        if not self._event.wait(timeout):
            raise TimeoutError("commit event not received in time")
        if isinstance(self.result, BaseException):
            raise self.result
        return self.result


class Subscriber:
    """A bounded mailbox for commit events; overflow marks it lagging."""

    def __init__(self, capacity: int = 65536) -> None:
        self.queue: queue.Queue[CommitEvent | None] = queue.Queue(capacity)
        self.lagging = False

    def offer(self, event: CommitEvent) -> bool:
        if self.lagging:
            return False
        try:
            self.queue.put_nowait(event)
            return True
        except queue.Full:
            self.lagging = True
            return False

    def close(self) -> None:
        try:
            self.queue.put_nowait(None)
        except queue.Full:
            pass


class PeerHalted(RuntimeError):
    """The peer stopped after a persistence failure."""


class _Job:
    __slots__ = ("seq", "payload", "tx", "sig_ok", "received_ns", "verified_ns", "done")

    def __init__(self, seq: int, payload: bytes, tx: Transaction | None, received_ns: int) -> None:
        self.seq = seq
        self.payload = payload
        self.tx = tx
        self.sig_ok = False
        self.received_ns = received_ns
        self.verified_ns = 0
        self.done: Callable[["_Job"], None] | None = None


class Validator:
    """Three-stage validation and commit for one peer.

    ``verify`` decides the signature/policy part of validity; it must be a pure
    function of the transaction.
    """

    def __init__(self, state: StateDB, ledger: LedgerWriter, verify: Callable[[Transaction], bool],
                 config: PipelineConfig | None = None,
                 seen_tx_ids: set[bytes] | None = None,
                 on_halt: Callable[[BaseException], None] | None = None,
                 checkpoint: Callable[[], None] | None = None,
                 checkpoint_interval_s: float = 10.0) -> None:
        self.state = state
        self.ledger = ledger
        self.verify = verify
        self.config = config or PipelineConfig()
        self.metrics = PipelineMetrics()
        self.cache = DeserCache(self.config.cache_capacity) if self.config.cache else None
        self.seen_tx_ids = seen_tx_ids if seen_tx_ids is not None else set()
        self.next_seq = ledger.last_seq + 1
        self.halted: BaseException | None = None
        self._on_halt = on_halt
        self._checkpoint = checkpoint
        self._checkpoint_interval = checkpoint_interval_s

        self._jobs: queue.SimpleQueue = queue.SimpleQueue()
        self._slots = threading.BoundedSemaphore(self.config.queue_capacity)
        self._reorder: dict[int, object] = {}
        self._reorder_cond = threading.Condition()
        self._stage2_busy = threading.Lock()
        self._stage3: queue.Queue = queue.Queue(self.config.stage3_capacity)
        self._stage3_gate = threading.Event()
        self._stage3_gate.set()
        self._height_cond = threading.Condition()
        self._height_waiters = 0

        self._waiters: dict[bytes, Waiter] = {}
        self._waiters_lock = threading.Lock()
        self._subscribers: list[Subscriber] = []
        self._subs_lock = threading.Lock()
        self.intake_log: list[int] | None = None  # stage-2 intake order, for audits
        self.housekept_seq = ledger.last_seq

        self._running = True
        self._threads = [threading.Thread(target=self._worker, name=f"sig{i}", daemon=True)
                         for i in range(self.config.sig_workers)]
        self._threads.append(threading.Thread(target=self._stage2, name="commit", daemon=True))
        self._threads.append(threading.Thread(target=self._stage3_loop, name="housekeeping", daemon=True))
        for t in self._threads:
            t.start()

    # -- intake --------------------------------------------------------------------

    def _deserialize(self, entry: OrderedEntry) -> Transaction | None:
        if self.cache is not None:
            return self.cache.get(entry.payload, entry.payload_hash)
        return _try_deserialize(entry.payload)

    def _admit(self) -> None:
        while not self._slots.acquire(timeout=0.5):
            if not self._running:
                raise PeerHalted("validator stopped") from self.halted

    def submit(self, entry: OrderedEntry) -> None:
        """Intake for stream mode. Call from one thread, in seq order."""
        now = time.time_ns()
        self.metrics.received += 1
        job = _Job(entry.seq, entry.payload, self._deserialize(entry), now)
        job.done = self._release
        self._admit()
        self._jobs.put(job)

    def submit_block(self, block: Block) -> None:
        """Intake for block mode: the whole block becomes one unit for stage 2."""
        now = time.time_ns()
        jobs = [_Job(e.seq, e.payload, self._deserialize(e), now) for e in block.entries]
        self.metrics.received += len(jobs)
        self._admit()
        self._release_unit(block.entries[0].seq, jobs)

    def _release(self, job: _Job) -> None:
        self._release_unit(job.seq, job)

    def _release_unit(self, seq: int, unit) -> None:
        with self._reorder_cond:
            self._reorder[seq] = unit
            if seq == self.next_seq:
                self._reorder_cond.notify()

    # -- stage 1 -------------------------------------------------------------------

    def _check_sig(self, job: _Job) -> None:
        tx = job.tx
        try:
            job.sig_ok = tx is not None and self.verify(tx)
        except Exception:  # a verifier bug must not wedge the pipeline
            log.exception("signature check failed for seq %d", job.seq)
            job.sig_ok = False
        job.verified_ns = time.time_ns()

    def _worker(self) -> None:
        while True:
            job = self._jobs.get()
            if job is None:
                return
            self._check_sig(job)
            job.done(job)

    # -- stage 2 -------------------------------------------------------------------

    def _take_next(self):
        with self._reorder_cond:
            while self._running and self.next_seq not in self._reorder:
                self._reorder_cond.wait(0.5)
            if not self._running:
                return None
            return self._reorder.pop(self.next_seq)

    def _stage2(self) -> None:
        while True:
            unit = self._take_next()
            if unit is None:
                return
            self._slots.release()
            try:
                if isinstance(unit, list):
                    self._commit_block(unit)
                else:
                    self._emit(self._commit(unit))
            except BaseException as exc:  # fail-stop
                self._halt(exc)
                return

    def _commit(self, job: _Job) -> CommitEvent:
        if not self._stage2_busy.acquire(blocking=False):
            raise AssertionError("stage 2 entered concurrently")
        try:
            if self.intake_log is not None:
                self.intake_log.append(job.seq)
            tx = job.tx
            valid = job.sig_ok
            tx_id = tx.tx_id if tx is not None else NULL_TX_ID
            if valid and tx_id in self.seen_tx_ids:
                valid = False
                self.metrics.duplicates += 1
            if valid:
                valid = self.state.mvcc_check(tx.rwset.reads)
            # Append first so a state snapshot never covers a seq the ledger lacks.
            self.ledger.append(job.seq, valid, job.payload)
            if self.ledger.log.failed is not None:
                raise PersistenceError("ledger flush failed") from self.ledger.log.failed
            if valid and tx.rwset.writes:
                self.state.commit(tx.rwset.writes, job.seq)
            else:
                self.state.mark_applied(job.seq)
            if tx is not None:
                self.seen_tx_ids.add(tx_id)
            self.next_seq = job.seq + 1
            self.metrics.committed += 1
            if valid:
                self.metrics.valid += 1
            else:
                self.metrics.invalid += 1
            if self._height_waiters:
                with self._height_cond:
                    self._height_cond.notify_all()
            return CommitEvent(job.seq, tx_id, valid, job.received_ns,
                               max(job.verified_ns, job.received_ns), time.time_ns())
        finally:
            self._stage2_busy.release()

    def _commit_block(self, jobs: list[_Job]) -> None:
        # Signature checks fan out to the workers but only within this block.
        pending = len(jobs)
        done = threading.Condition()

        def finished(_job: _Job) -> None:
            nonlocal pending
            with done:
                pending -= 1
                if pending == 0:
                    done.notify()

        for job in jobs:
            job.done = finished
            self._jobs.put(job)
        with done:
            while pending:
                done.wait(0.5)
                if not self._running:
                    return
        events = [self._commit(job) for job in jobs]
        self.ledger.sync()
        self.metrics.blocks += 1
        self.metrics.block_syncs += 1
        synced = time.time_ns()
        for ev in events:
            self._emit(CommitEvent(ev.seq, ev.tx_id, ev.valid, ev.received_ns, ev.verified_ns, synced))

    def _emit(self, event: CommitEvent) -> None:
        try:
            self._stage3.put_nowait(event)
        except queue.Full:
            self.metrics.stage3_backpressure += 1
            while self._running:
                try:
                    self._stage3.put(event, timeout=0.5)
                    return
                except queue.Full:
                    continue

    # -- stage 3 -------------------------------------------------------------------

    def _stage3_loop(self) -> None:
        last_checkpoint = time.monotonic()
        while True:
            try:
                event = self._stage3.get(timeout=0.5)
            except queue.Empty:
                event = ...
            if event is None:
                return
            self._stage3_gate.wait()
            if event is not ...:
                self._housekeep(event)
                self.housekept_seq = event.seq
            if (self._checkpoint is not None and
                    time.monotonic() - last_checkpoint >= self._checkpoint_interval):
                last_checkpoint = time.monotonic()
                try:
                    self._checkpoint()
                except Exception:
                    log.exception("checkpoint failed")

    def _housekeep(self, event: CommitEvent) -> None:
        with self._waiters_lock:
            waiter = self._waiters.pop(event.tx_id, None)
        if waiter is not None:
            waiter.resolve(event)
        if self._subscribers:
            with self._subs_lock:
                subs = list(self._subscribers)
            for sub in subs:
                if not sub.offer(event):
                    self.metrics.lagging_subscribers += 1
                    self.unsubscribe(sub)
                    sub.close()

    def pause_housekeeping(self) -> None:
        self._stage3_gate.clear()

    def resume_housekeeping(self) -> None:
        self._stage3_gate.set()

    @property
    def stage3_depth(self) -> int:
        return self._stage3.qsize()

    # -- client-facing ---------------------------------------------------------------

    def register_waiter(self, tx_id: bytes) -> Waiter:
        w = Waiter()
        with self._waiters_lock:
            if self.halted is not None:
                w.resolve(PeerHalted(str(self.halted)))
            else:
                self._waiters[tx_id] = w
        return w

    def cancel_waiter(self, tx_id: bytes) -> None:
        with self._waiters_lock:
            self._waiters.pop(tx_id, None)

    def subscribe(self, capacity: int = 65536) -> Subscriber:
        sub = Subscriber(capacity)
        with self._subs_lock:
            self._subscribers.append(sub)
        return sub

    def unsubscribe(self, sub: Subscriber) -> None:
        with self._subs_lock:
            if sub in self._subscribers:
                self._subscribers.remove(sub)

    def wait_height(self, seq: int, timeout: float = 10.0) -> bool:
        """Block until every seq up to ``seq`` has been committed."""
        deadline = time.monotonic() + timeout
        with self._height_cond:
            self._height_waiters += 1
            try:
                while self.next_seq <= seq:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0 or self.halted is not None or not self._running:
                        return False
                    self._height_cond.wait(min(remaining, 0.05))
            finally:
                self._height_waiters -= 1
        return True

    @property
    def last_committed_seq(self) -> int:
        return self.next_seq - 1

    def wait_idle(self, seq: int, timeout: float = 30.0) -> bool:
        """Wait until ``seq`` is committed and stage 3 has drained."""
        deadline = time.monotonic() + timeout
        while self.housekept_seq < seq:
            if time.monotonic() >= deadline or self.halted is not None:
                return False
            time.sleep(0.001)
        return True

    # -- lifecycle -------------------------------------------------------------------

    def _halt(self, exc: BaseException) -> None:
        log.critical("peer halting: %s", exc)
        self.halted = exc
        self._running = False
        with self._waiters_lock:
            waiters = list(self._waiters.values())
            self._waiters.clear()
        for w in waiters:
            w.resolve(PeerHalted(str(exc)))
        with self._subs_lock:
            for s in self._subscribers:
                s.close()
        with self._height_cond:
            self._height_cond.notify_all()
        if self._on_halt is not None:
            self._on_halt(exc)

    def stop(self) -> None:
        self._running = False
        self._stage3_gate.set()
        for _ in range(self.config.sig_workers):
            self._jobs.put(None)
        with self._reorder_cond:
            self._reorder_cond.notify_all()
        try:
            self._stage3.put(None, timeout=1.0)
        except queue.Full:
            pass
        for t in self._threads:
            t.join(timeout=2.0)
        with self._subs_lock:
            for s in self._subscribers:
                s.close()
            self._subscribers.clear()
