"""Workload generators, aggregates, CSV output and small end-to-end runs."""
from __future__ import annotations

import csv
import math
from collections import Counter

import numpy as np
import pytest

from streamledger.bench import (
    CSV_COLUMNS,
    OpRecord,
    aggregate,
    gen_scm,
    gen_ycsb,
    preset,
    read_csv,
    recompute_from_csv,
    run_benchmark,
)
from streamledger.bench.report import OK, TIMEOUT, middle_window
from streamledger.bench.workload import WorkloadSpec, exact_counts, working_set
from streamledger.chaincode import scm
from streamledger.ledger import deserialize_tx
from streamledger.network import NetworkConfig
from streamledger.replay import read_ledger

FAST = NetworkConfig(crypto="null", fsync=False, flush_timeout_ms=10)


# -- generators -------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        WorkloadSpec("ycsb", {"insert": 0.5, "read": 0.4})
    with pytest.raises(ValueError):
        WorkloadSpec("ycsb", {"read": 1.0}, total_ops=0)
    with pytest.raises(ValueError):
        preset("tpcc")


def test_exact_counts_sum():
    assert sum(exact_counts({"a": 1 / 3, "b": 1 / 3, "c": 1 / 3}, 10).values()) == 10


def test_ycsb90_mix():
    ops = gen_ycsb(preset("ycsb90", 10_000))
    share = Counter(o.op_type for o in ops)["insert"] / len(ops)
    assert abs(share - 0.9) <= 0.01
    assert all(len(o.proposal.args[1]) == 1024 for o in ops if o.op_type == "insert")


def test_ycsb_working_set():
    spec = preset("ycsb50", 5000, working_set_fraction=0.1)
    subset = {f"user{k:08d}".encode() for k in working_set(spec)}
    assert len(subset) == 1000
    assert {o.proposal.args[0] for o in gen_ycsb(spec)} <= subset


def test_generators_are_deterministic():
    a, b = gen_ycsb(preset("ycsb50", 500, 3, seed=9)), gen_ycsb(preset("ycsb50", 500, 3, seed=9))
    assert a == b
    assert a != gen_ycsb(preset("ycsb50", 500, 3, seed=10))
    assert gen_scm(preset("scm95", 500, 2))[1] == gen_scm(preset("scm95", 500, 2))[1]


def test_scm_mix_and_scale():
    data, ops = gen_scm(preset("scm95", 10_000))
    counts = Counter(o.op_type for o in ops)
    analytics = counts["days_of_supply"] + counts["bullwhip"]
    assert abs(analytics / len(ops) - 0.05) <= 0.005
    assert abs(counts["days_of_supply"] - counts["bullwhip"]) <= 1
    assert (data.vendors, data.products, len(data.contracts)) == (50, 500, 6000)
    ids = {c[0] for c in data.contracts}
    assert all(o.proposal.args[1].decode() in ids for o in ops if o.op_type == "place_order")


def test_scm_updates_follow_own_orders():
    _, ops = gen_scm(preset("scm99", 3000, 4))
    placed: dict[int, set[bytes]] = {c: set() for c in range(4)}
    for o in ops:
        if o.op_type == "place_order":
            placed[o.client].add(o.proposal.args[0])
        elif o.op_type == "update_order":
            assert o.proposal.args[0] in placed[o.client]


# -- aggregates ---------------------------------------------------------------------

def fake_records(n: int, seed: int = 0) -> list[OpRecord]:
    rng = np.random.default_rng(seed)
    out, t = [], 1_000_000
    for i in range(n):
        e, o, v = (int(x) for x in rng.integers(100_000, 2_000_000, size=3))
        status = TIMEOUT if rng.random() < 0.02 else OK
        r = OpRecord(i, "insert", i % 3, t, t + e, t + e + o, t + e + o + v, bool(rng.random() < 0.8),
                     status, i + 1, t + e + o + 10, t + e + o + 20, t + e + o + v - 5)
        out.append(r)
        t += int(rng.integers(50_000, 500_000))
    return out


def test_middle_window():
    recs = fake_records(1000)
    win = middle_window(recs)
    assert len(win) == 800
    assert {r.op_index for r in win} == set(range(100, 900))
    assert aggregate(recs)["window_ops"] == 800


def test_goodput_bounded_by_throughput():
    a = aggregate(fake_records(500, seed=2))
    assert a["goodput"] <= a["throughput"]
    assert a["failing_pct"] == pytest.approx(100 * a["invalid"] / (a["valid"] + a["invalid"]))
    clean = fake_records(500, seed=3)
    for r in clean:
        r.valid = True
    c = aggregate(clean)
    assert c["goodput"] == c["throughput"] and c["failing_pct"] == 0


def test_csv_recompute_matches(tmp_path):
    from streamledger.bench import RunReport

    report = RunReport(fake_records(777, seed=4))
    path = tmp_path / "r.csv"
    report.write_csv(path)
    with open(path) as fh:
        assert next(csv.reader(fh))[:8] == ["op_index", "op_type", "client", "submit_ns", "endorsed_ns",
                                           "ordered_ns", "committed_ns", "valid"]
    assert CSV_COLUMNS[:8] == ["op_index", "op_type", "client", "submit_ns", "endorsed_ns",
                               "ordered_ns", "committed_ns", "valid"]
    assert read_csv(path) == report.records
    ref = recompute_from_csv(path)
    a = report.aggregates
    assert ref["throughput"] == pytest.approx(a["throughput"])
    assert ref["goodput"] == pytest.approx(a["goodput"])
    assert ref["failing_pct"] == pytest.approx(a["failing_pct"])
    assert ref["latency_mean_ms"] == pytest.approx(a["latency_ms"]["mean"])
    assert ref["latency_p50_ms"] == pytest.approx(a["latency_ms"]["p50"])


# -- small live runs ----------------------------------------------------------------

def test_single_client_run_is_reproducible(tmp_path):
    runs = [run_benchmark("ycsb50", 200, 1, FAST, tmp_path / f"r{i}", seed=5, key_space=200)
            for i in range(2)]
    flags = [[r.valid for r in res.report.records] for res in runs]
    assert flags[0] == flags[1]
    assert all(r.status == OK for res in runs for r in res.report.records)
    assert runs[0].report.failing_pct == 0
    assert runs[0].live_digests == runs[1].live_digests


def test_stage_breakdown_adds_up(tmp_path):
    res = run_benchmark("ycsb90", 300, 2, FAST, tmp_path / "r", csv_out=tmp_path / "r.csv",
                        key_space=500)
    a = res.report.aggregates
    parts = a["endorse_ms"]["mean"] + a["order_ms"]["mean"] + a["validate_ms"]["mean"]
    assert parts == pytest.approx(a["latency_ms"]["mean"], rel=0.05)
    assert a["completed"] + a["timeouts"] + a["errors"] + a["refused"] == a["window_ops"]
    assert len(res.report.records) == 300
    assert recompute_from_csv(tmp_path / "r.csv")["throughput"] == pytest.approx(a["throughput"])


def test_hot_key_failures_are_provably_stale(tmp_path):
    """Two clients updating one key: every invalid tx read a version some earlier valid tx overwrote."""
    res = run_benchmark("ycsb50", 400, 2, FAST, tmp_path / "r", key_space=1, op_mix={"update": 1.0})
    assert res.report.aggregates["failing_pct"] > 0
    version = 0
    stale = 0
    for rec in read_ledger(res.ledger_paths[0]):
        tx = deserialize_tx(rec.tx_bytes)
        reads = dict(tx.rwset.reads)
        if rec.valid:
            for k, v in reads.items():
                assert v == version
            if tx.rwset.writes:
                version = rec.seq
        elif reads and tx.chaincode_id == "kv" and tx.args[0] == b"update":
            (v,) = reads.values()
            assert v != version and v < version
            stale += 1
    assert stale > 0


def test_scm_run_single_peer(tmp_path):
    res = run_benchmark("scm95", 150, 2, FAST, tmp_path / "r")
    a = res.report.aggregates
    assert a["completed"] + a["refused"] == a["window_ops"]
    assert not math.isnan(a["latency_ms"]["p50"])
    recs = read_ledger(res.ledger_paths[0])
    assert len(recs) == res.last_seq
    inv = [r for r in recs if r.valid and deserialize_tx(r.tx_bytes).args[0] == b"place_order"]
    assert inv and all(scm.CHAINCODE_ID == deserialize_tx(r.tx_bytes).chaincode_id for r in inv)
