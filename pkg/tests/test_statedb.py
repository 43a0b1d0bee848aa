"""Versioned store: MVCC against a serial oracle, torn-write stress, stripes, checkpoints."""
from __future__ import annotations

import hashlib
import random
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamledger.ledger import Key
from streamledger.statedb import StateDB, StateEntry

from .helpers import kv_key


def test_basic_get_and_versions():
    db = StateDB()
    k = kv_key("a")
    assert db.get(k) is None and db.version_of(k) == 0
    db.commit([(k, b"v")], 7)
    assert db.get(k) == StateEntry(b"v", 7)
    db.commit([(k, b"w")], 9)
    assert db.get(k) == StateEntry(b"w", 9)


def test_mvcc_check_definition():
    db = StateDB()
    k = kv_key("k")
    assert db.mvcc_check([])
    assert db.mvcc_check([(k, 0)])
    db.commit([(k, b"x")], 5)
    assert db.mvcc_check([(k, 5)])
    db.commit([(k, b"y")], 6)
    assert not db.mvcc_check([(k, 5)])


def test_delete_absent_is_noop_and_delete_resets_version():
    db = StateDB()
    k = kv_key("gone")
    db.commit([(k, None)], 1)
    assert len(db) == 0
    db.commit([(k, b"1")], 2)
    db.commit([(k, None)], 3)
    assert db.get(k) is None and db.version_of(k) == 0


def test_stripe_count_must_be_power_of_two():
    for bad in (0, 3, 48):
        with pytest.raises(ValueError):
            StateDB(bad)


def test_stripe_for_is_stable_and_in_range():
    db = StateDB(64)
    k = kv_key("x")
    assert db.stripe_for(k) == db.stripe_for(kv_key("x"))
    assert StateDB(1).stripe_for(k) == 0


def test_stripe_load_balance():
    rng = random.Random(3)
    db = StateDB(64)
    hist = np.bincount([db.stripe_for(kv_key(rng.randbytes(12))) for _ in range(10_000)], minlength=64)
    assert hist.max() <= 3 * hist.mean()


def test_snapshot_read_absent_and_present():
    db = StateDB()
    a, b = kv_key("a"), kv_key("b")
    db.commit([(a, b"1")], 1)
    assert db.snapshot_read([b, a]) == [(b, 0, None), (a, 1, b"1")]


# -- oracle equivalence ---------------------------------------------------------

def serial_oracle(history):
    """Brute force: replay every tx against a plain dict; returns flags and final dict."""
    state: dict[Key, tuple[int, bytes]] = {}
    flags = []
    for seq, (reads, writes) in enumerate(history, start=1):
        ok = all(state.get(k, (0, None))[0] == v for k, v in reads)
        if ok:
            for k, val in writes:
                if val is None:
                    state.pop(k, None)
                else:
                    state[k] = (seq, val)
        flags.append(ok)
    return flags, state


def random_history(rng: random.Random, n: int, nkeys: int):
    """Reads carry versions a client might plausibly have seen (current or stale)."""
    names = [kv_key(f"k{i}") for i in range(nkeys)]
    live: dict[Key, list[int]] = {k: [0] for k in names}
    history = []
    for seq in range(1, n + 1):
        rk = sorted(rng.sample(names, rng.randint(0, 3)))
        wk = sorted(rng.sample(names, rng.randint(0, 3)))
        reads = [(k, rng.choice(live[k][-3:])) for k in rk]
        writes = [(k, None if rng.random() < 0.1 else rng.randbytes(4)) for k in wk]
        for k, _ in writes:
            live[k].append(seq)
        history.append((reads, writes))
    return history


@pytest.mark.parametrize("stripes", [1, 64])
@pytest.mark.parametrize("seed", range(5))
def test_mvcc_matches_serial_oracle(stripes, seed):
    history = random_history(random.Random(seed), 1000, 20)
    expected_flags, expected_state = serial_oracle(history)
    db = StateDB(stripes)
    flags = []
    for seq, (reads, writes) in enumerate(history, start=1):
        ok = db.mvcc_check(reads)
        if ok and writes:
            db.commit(writes, seq)
        flags.append(ok)
    assert flags == expected_flags
    assert {k: (v, val) for k, v, val in db.items()} == expected_state


@given(st.integers(0, 2**32))
@settings(max_examples=20, deadline=None)
def test_stripe_count_does_not_change_validity(seed):
    history = random_history(random.Random(seed), 200, 6)
    results = []
    for stripes in (1, 64):
        db = StateDB(stripes)
        flags = []
        for seq, (reads, writes) in enumerate(history, start=1):
            ok = db.mvcc_check(reads)
            if ok and writes:
                db.commit(writes, seq)
            flags.append(ok)
        results.append((flags, db.digest()))
    assert results[0] == results[1]


# -- concurrency ---------------------------------------------------------------

def _checked_value(seq: int) -> bytes:
    body = struct.pack("<Q", seq)
    return body + hashlib.sha256(body).digest()


def test_no_torn_writes_under_eight_readers():
    db = StateDB(8)
    keys = [kv_key(f"k{i}") for i in range(16)]
    db.commit([(k, _checked_value(1)) for k in keys], 1)
    stop = threading.Event()
    problems: list[str] = []

    def reader():
        last: dict[Key, int] = {}
        while not stop.is_set():
            for key, version, value in db.snapshot_read(keys):
                if value != _checked_value(version):
                    problems.append(f"torn {key} v{version}")
                if version < last.get(key, 0):
                    problems.append(f"version went back on {key}")
                last[key] = version
            e = db.get(keys[0])
            if e.value != _checked_value(e.version):
                problems.append("torn get")

    threads = [threading.Thread(target=reader) for _ in range(8)]
    for t in threads:
        t.start()
    for seq in range(2, 2000):
        touched = keys[seq % 16:] + keys[: seq % 3]
        db.commit(sorted({k: _checked_value(seq) for k in touched}.items()), seq)
    stop.set()
    for t in threads:
        t.join()
    assert not problems, problems[:5]


def test_snapshot_within_a_stripe_is_atomic():
    # one stripe: a multi-key commit must never be seen half-applied
    db = StateDB(1)
    a, b = kv_key("a"), kv_key("b")
    db.commit([(a, b"0"), (b, b"0")], 1)
    stop = threading.Event()
    bad = []

    def reader():
        while not stop.is_set():
            (_, va, _), (_, vb, _) = db.snapshot_read([a, b])
            if va != vb:
                bad.append((va, vb))

    t = threading.Thread(target=reader)
    t.start()
    for seq in range(2, 3000):
        db.commit([(a, b"x"), (b, b"y")], seq)
    stop.set()
    t.join()
    assert not bad


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip_and_layout(tmp_path):
    db = StateDB()
    db.commit([(kv_key("a"), b"1"), (Key("scm", b"V/1"), b"{}")], 4)
    db.mark_applied(6)
    path = tmp_path / "state.ckpt"
    assert db.write_checkpoint(path) == 6
    raw = path.read_bytes()
    assert struct.unpack_from("<Q", raw)[0] == 6
    # first frame: the smallest key, kv/a
    klen = struct.unpack_from("<I", raw, 8)[0]
    assert raw[12:12 + klen] == b"kv\x00a"
    loaded = StateDB.load_checkpoint(path, 16)
    assert loaded.last_applied_seq == 6
    assert loaded.digest() == db.digest()
    assert not list(tmp_path.glob("*.tmp"))
