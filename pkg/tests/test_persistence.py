"""Batched append log: thresholds, flush-on-read, differential oracle, torn-tail recovery."""
from __future__ import annotations

import errno
import os
import random
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamledger.ledger import GENESIS_HASH, LedgerRecord, chain_hash_fn, encode_record
from streamledger.persistence import (
    FSYNC_NEVER,
    AppendLog,
    BatcherConfig,
    PersistenceError,
    recover,
)

SLOW = BatcherConfig(flush_bytes=64 * 1024, flush_timeout_ms=60_000, fsync_policy=FSYNC_NEVER)


def records(n: int, seed: int = 0, max_len: int = 200) -> list[bytes]:
    rng = random.Random(seed)
    prev, out = GENESIS_HASH, []
    for i in range(1, n + 1):
        tx = rng.randbytes(rng.randint(0, max_len))
        prev = chain_hash_fn(prev, tx)
        out.append(encode_record(LedgerRecord(i, rng.random() < 0.8, prev, tx)))
    return out


def test_config_validation():
    with pytest.raises(ValueError):
        BatcherConfig(flush_bytes=0)
    with pytest.raises(ValueError):
        BatcherConfig(flush_timeout_ms=0)
    with pytest.raises(ValueError):
        BatcherConfig(fsync_policy="sometimes")


def test_small_append_is_not_durable_yet(tmp_path):
    with AppendLog(tmp_path / "l", SLOW) as log:
        rec = records(1, max_len=55)[0]
        assert log.buffered_append(rec) == 0
        assert log.durable_length == 0 and log.logical_length == len(rec)


def test_byte_threshold_triggers_flush(tmp_path):
    cfg = BatcherConfig(flush_bytes=64 * 1024, flush_timeout_ms=60_000, fsync_policy=FSYNC_NEVER)
    with AppendLog(tmp_path / "l", cfg) as log:
        log.buffered_append(b"\x00" * (64 * 1024))
        log.buffered_append(b"\x00")
        deadline = time.monotonic() + 5
        while log.durable_length == 0 and time.monotonic() < deadline:
            time.sleep(0.001)
        assert log.durable_length >= 64 * 1024


def test_timeout_triggers_flush(tmp_path):
    cfg = BatcherConfig(flush_bytes=1 << 20, flush_timeout_ms=100, fsync_policy=FSYNC_NEVER)
    with AppendLog(tmp_path / "l", cfg) as log:
        t0 = time.monotonic()
        log.buffered_append(b"x" * 100)
        while log.durable_length == 0 and time.monotonic() - t0 < 5:
            time.sleep(0.002)
        waited = time.monotonic() - t0
        assert log.durable_length == 100
        assert 0.09 <= waited < 1.0


def test_flush_on_read_rules(tmp_path):
    with AppendLog(tmp_path / "l", SLOW) as log:
        log.buffered_append(b"a" * 10)
        log.flush()
        before = log.metrics.flushes
        assert log.read_at(0, 10) == b"a" * 10
        assert log.metrics.flushes == before  # durable range: no flush
        log.buffered_append(b"b" * 10)
        assert log.read_at(5, 10) == b"a" * 5 + b"b" * 5
        assert log.metrics.flushes == before + 1
        with pytest.raises(IndexError):
            log.read_at(15, 10)


@given(st.lists(st.tuples(st.sampled_from(["append", "read", "flush"]), st.binary(max_size=300),
                          st.integers(0, 10**6), st.integers(0, 400)), max_size=60),
       st.sampled_from([1, 64, 4096, 64 * 1024]))
@settings(max_examples=40, deadline=None)
def test_differential_against_direct_write(tmp_path_factory, ops, flush_bytes):
    """Random appends/reads/flushes: batched file == unbatched oracle, reads agree at every step."""
    d = tmp_path_factory.mktemp("diff")
    cfg = BatcherConfig(flush_bytes=flush_bytes, flush_timeout_ms=5, fsync_policy=FSYNC_NEVER)
    log = AppendLog(d / "batched", cfg, min_record_len=1)
    oracle = open(d / "direct", "wb", buffering=0)
    content = bytearray()
    try:
        for kind, data, off, length in ops:
            if kind == "append":
                assert log.buffered_append(data) == len(content)
                oracle.write(data)
                content += data
            elif kind == "read" and content:
                o = off % len(content)
                n = min(length, len(content) - o)
                assert log.read_at(o, n) == bytes(content[o:o + n])
            elif kind == "flush":
                log.flush()
            assert log.durable_length <= log.logical_length == len(content)
    finally:
        log.close()
        oracle.close()
    assert (d / "batched").read_bytes() == (d / "direct").read_bytes() == bytes(content)


def test_recover_clean_and_empty(tmp_path):
    assert recover(tmp_path / "missing") == (0, [])
    (tmp_path / "empty").write_bytes(b"")
    assert recover(tmp_path / "empty") == (0, [])
    recs = records(5)
    (tmp_path / "clean").write_bytes(b"".join(recs))
    assert recover(tmp_path / "clean") == (sum(map(len, recs)), recs)


def test_truncate_at_every_byte(tmp_path):
    """A 100-record log cut at every byte recovers exactly the complete records before the cut."""
    recs = records(100, seed=7, max_len=40)
    full = b"".join(recs)
    boundaries = [0]
    for r in recs:
        boundaries.append(boundaries[-1] + len(r))
    path = tmp_path / "ledger.dat"
    for cut in range(len(full) + 1):
        path.write_bytes(full[:cut])
        valid, frames = recover(path)
        expect = max(b for b in boundaries if b <= cut)
        assert valid == expect, cut
        assert b"".join(frames) == full[:expect]
        assert path.stat().st_size == expect


def test_crash_loses_only_unflushed_suffix(tmp_path):
    recs = records(30, seed=3)
    log = AppendLog(tmp_path / "l", SLOW)
    for r in recs[:20]:
        log.buffered_append(r)
    log.flush()
    for r in recs[20:]:
        log.buffered_append(r)
    log.crash()
    reopened = AppendLog(tmp_path / "l", SLOW)
    assert reopened.read_all() == b"".join(recs[:20])
    reopened.close()


def test_torn_tail_is_truncated_on_open(tmp_path):
    recs = records(4)
    (tmp_path / "l").write_bytes(b"".join(recs) + recs[0][:10])
    with AppendLog(tmp_path / "l", SLOW) as log:
        assert log.logical_length == sum(map(len, recs))
        assert log.buffered_append(b"z" * 45) == sum(map(len, recs))


def test_write_failure_halts(tmp_path, monkeypatch):
    seen = []
    log = AppendLog(tmp_path / "l", SLOW, on_error=seen.append)
    log.buffered_append(b"x" * 50)

    def enospc(*_a, **_k):
        raise OSError(errno.ENOSPC, "no space left on device")

    monkeypatch.setattr(os, "pwrite", enospc)
    with pytest.raises(PersistenceError):
        log.flush()
    assert seen and log.failed is not None
    with pytest.raises(PersistenceError):
        log.buffered_append(b"y")
    monkeypatch.undo()
    log.close()


def test_truncate_inside_buffer_and_durable(tmp_path):
    with AppendLog(tmp_path / "l", SLOW, min_record_len=1) as log:
        log.buffered_append(b"a" * 10)
        log.flush()
        log.buffered_append(b"b" * 10)
        log.truncate(15)
        assert log.read_all() == b"a" * 10 + b"b" * 5
        log.truncate(4)
        assert log.read_all() == b"a" * 4
