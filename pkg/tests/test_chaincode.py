"""Chaincode execution: KV and SCM functions, analytics against reference calculators."""
from __future__ import annotations

import math
import random
from collections import Counter

import numpy as np
import pytest

from streamledger.chaincode import ChaincodeError, Proposal, execute, kv, scm
from streamledger.ledger import Key
from streamledger.statedb import StateDB

from .helpers import kv_key


class Chain:
    """Executes proposals and commits their writes directly, one seq per call."""

    def __init__(self) -> None:
        self.db = StateDB()
        self.seq = 0

    def run(self, cc: str, fn: str, *args):
        res = execute(Proposal(cc, fn, tuple(a if isinstance(a, bytes) else str(a).encode() for a in args),
                               "client0"), self.db)
        self.seq += 1
        if res.rwset.writes:
            self.db.commit(res.rwset.writes, self.seq)
        return res

    def scm_get(self, name: str):
        e = self.db.get(Key("scm", name.encode()))
        return None if e is None else scm.dec(e.value)


# -- kv ------------------------------------------------------------------------

def test_kv_read_on_empty_state():
    res = execute(Proposal("kv", "read", (b"k",), "c"), StateDB())
    assert res.rwset.reads == ((kv_key("k"), 0),) and res.rwset.writes == ()


def test_kv_insert_1kb():
    value = bytes(1024)
    res = execute(Proposal("kv", "insert", (b"k", value), "c"), StateDB())
    assert res.rwset.reads == ((kv_key("k"), 0),)
    assert res.rwset.writes == ((kv_key("k"), value),)


def test_kv_load_is_deterministic_blind_write():
    c = Chain()
    res = c.run("kv", "load", 0, 5, 16, 9)
    assert res.rwset.reads == ()
    assert [k.name for k, _ in res.rwset.writes] == [kv.key_name(i).encode() for i in range(5)]
    assert res.rwset.writes[2][1] == kv.load_value(2, 16, 9)


def test_unknown_function_fails():
    with pytest.raises(ChaincodeError):
        execute(Proposal("kv", "nope", (), "c"), StateDB())


def test_execution_is_deterministic_and_reads_are_complete():
    c = Chain()
    c.run("kv", "insert", b"a", b"1")
    c.run("kv", "insert", b"b", b"2")
    p = Proposal("kv", "update", (b"a", b"9"), "c")
    r1, r2 = execute(p, c.db), execute(p, c.db)
    assert r1 == r2
    c.db.commit([(kv_key("b"), b"changed")], 99)  # not in the read set
    assert execute(p, c.db) == r1
    c.db.commit([(kv_key("a"), b"changed")], 100)  # in the read set
    assert execute(p, c.db).rwset != r1.rwset


# -- scm fixtures ---------------------------------------------------------------

def small_world(vendors=4, products=3, inventory=100) -> Chain:
    c = Chain()
    for v in range(vendors):
        c.run("scm", "create_vendor", v, f"v{v}")
    for p in range(products):
        c.run("scm", "create_product", p, f"p{p}")
    for v in range(vendors):
        for p in range(products):
            c.run("scm", "set_inventory", v, p, inventory)
    return c


def test_create_contract():
    c = small_world()
    res = c.run("scm", "create_contract", "c1", 0, 1, 2)
    read_names = {k.name.decode() for k, _ in res.rwset.reads}
    assert {"V/0", "V/1", "P/2"} <= read_names
    assert [k.name for k, _ in res.rwset.writes] == [b"C/c1"]
    with pytest.raises(ChaincodeError):
        c.run("scm", "create_contract", "c1", 0, 1, 2)  # duplicate
    with pytest.raises(ChaincodeError):
        c.run("scm", "create_contract", "c2", 1, 1, 2)  # buyer == seller
    with pytest.raises(ChaincodeError):
        c.run("scm", "create_contract", "c3", 0, 99, 2)


def test_bootstrap_dataset_shape():
    d = scm.bootstrap_dataset(0)
    assert len(d.contracts) == 6000
    assert d.vendors == 50 and d.products == 500
    assert all(b != s and 0 <= b < 50 and 0 <= s < 50 and 0 <= p < 500 for _, b, s, p in d.contracts)
    assert scm.bootstrap_dataset(0) == d
    assert scm.bootstrap_dataset(1) != d


def test_chunked_load_equals_dataset():
    c = Chain()
    params = (3, 5, 7, 40, 1000)
    for i in range(4):
        c.run("scm", "load", *params, i, 4)
    expected = dict(scm.bootstrap_dataset(*params).writes())
    got = {k.name.decode(): v for k, _, v in c.db.items()}
    assert got == expected


def test_place_order():
    c = small_world(inventory=100)
    c.run("scm", "create_contract", "c1", 0, 1, 2)  # seller 1, product 2
    res = c.run("scm", "place_order", "o1", "c1", 10, 0)
    assert {k.name.decode() for k, _ in res.rwset.reads} >= {"C/c1", "I/1/2"}
    assert c.scm_get("I/1/2") == {"quantity": 90}
    assert c.scm_get("O/o1")["status"] == scm.PLACED
    with pytest.raises(ChaincodeError):
        c.run("scm", "place_order", "o2", "missing", 1, 0)
    c.run("scm", "set_inventory", 1, 2, 5)
    with pytest.raises(ChaincodeError):
        c.run("scm", "place_order", "o3", "c1", 10, 0)


def test_update_order_transitions():
    c = small_world(inventory=100)
    c.run("scm", "set_inventory", 0, 2, 0)  # buyer starts empty
    c.run("scm", "create_contract", "c1", 0, 1, 2)
    c.run("scm", "place_order", "o1", "c1", 10, 0)
    res = c.run("scm", "update_order", "o1", scm.SHIPPED)
    assert len(res.rwset.writes) == 1
    c.run("scm", "update_order", "o1", scm.DELIVERED)
    assert c.scm_get("I/0/2") == {"quantity": 10}
    with pytest.raises(ChaincodeError):
        c.run("scm", "update_order", "o1", scm.SHIPPED)


def test_concurrent_orders_on_same_inventory_conflict():
    c = small_world()
    c.run("scm", "create_contract", "c1", 0, 1, 2)
    c.run("scm", "create_contract", "c2", 3, 1, 2)
    a = execute(Proposal("scm", "place_order", (b"oa", b"c1", b"1", b"0"), "x"), c.db)
    b = execute(Proposal("scm", "place_order", (b"ob", b"c2", b"1", b"0"), "y"), c.db)
    assert c.db.mvcc_check(a.rwset.reads)
    c.db.commit(a.rwset.writes, 1000)
    assert not c.db.mvcc_check(b.rwset.reads)


# -- analytics -------------------------------------------------------------------

def test_days_of_supply_arithmetic():
    assert scm.days_of_supply_value(100, [(5, 0, True), (5, 0, True)]) == 10.0
    assert math.isinf(scm.days_of_supply_value(100, []))
    assert math.isinf(scm.days_of_supply_value(100, [(5, 0, False)]))


def test_bullwhip_definition():
    assert scm.bullwhip_value([([1, 2, 3], [3, 2, 1]), ([5, 9], [9, 5])]) == pytest.approx(1.0)
    with pytest.raises(ChaincodeError):
        scm.bullwhip_value([([5, 15], [10, 10])])


def reference_days_of_supply(log, vendor, product, inventory):
    """Straight from the raw order list: ``log`` rows are dicts in placement order."""
    sold = [o for o in log if o["seller"] == vendor][-scm.DEMAND_WINDOW:]
    if not sold:
        return math.inf
    days = max(o["day"] for o in sold) - min(o["day"] for o in sold) + 1
    demand = sum(o["qty"] for o in sold if o["product"] == product)
    return math.inf if demand == 0 else inventory / (demand / days)


def reference_bullwhip(log, vendors):
    ratios = []
    for v in range(vendors):
        out_q = np.array([o["qty"] for o in log if o["buyer"] == v], dtype=float)
        in_q = np.array([o["qty"] for o in log if o["seller"] == v], dtype=float)
        if len(out_q) == 0 or len(in_q) == 0:
            continue
        cv_out, cv_in = out_q.std() / out_q.mean(), in_q.std() / in_q.mean()
        if cv_in > 0:
            ratios.append(cv_out / cv_in)
    return float(np.mean(ratios)) if ratios else None


@pytest.mark.parametrize("seed", range(4))
def test_analytics_match_reference_calculators(seed):
    rng = random.Random(seed)
    vendors, products = 4, 3
    c = small_world(vendors, products, inventory=10_000)
    contracts = []
    for i in range(10):
        b, s = rng.sample(range(vendors), 2)
        p = rng.randrange(products)
        c.run("scm", "create_contract", f"c{i}", b, s, p)
        contracts.append((f"c{i}", b, s, p))
    log = []
    for n in range(rng.randint(5, 60)):
        cid, b, s, p = rng.choice(contracts)
        qty, day = rng.randint(1, 50), n // 7
        c.run("scm", "place_order", f"o{n}", cid, qty, day)
        log.append({"buyer": b, "seller": s, "product": p, "qty": qty, "day": day})
    for v in range(vendors):
        for p in range(products):
            inv = c.scm_get(f"I/{v}/{p}")["quantity"]
            got = c.run("scm", "days_of_supply", v, p).result.decode()
            ref = reference_days_of_supply(log, v, p, inv)
            if math.isinf(ref):
                assert got == scm.INFINITE_SUPPLY
            else:
                assert float(got) == pytest.approx(ref)
    ref = reference_bullwhip(log, vendors)
    if ref is None:
        with pytest.raises(ChaincodeError):
            c.run("scm", "bullwhip")
    else:
        assert float(c.run("scm", "bullwhip").result) == pytest.approx(ref)


def test_bullwhip_read_set_covers_scanned_orders():
    c = small_world()
    c.run("scm", "create_contract", "c1", 0, 1, 2)
    c.run("scm", "create_contract", "c2", 1, 0, 2)
    for i, (cid, q) in enumerate([("c1", 3), ("c1", 9), ("c2", 4), ("c2", 8)]):
        c.run("scm", "place_order", f"o{i}", cid, q, 0)
    res = c.run("scm", "bullwhip")
    names = {k.name.decode() for k, _ in res.rwset.reads}
    assert {f"O/o{i}" for i in range(4)} <= names
    assert {"OIDX/0/buy", "OIDX/0/sell", "OIDX/1/buy", "OIDX/1/sell"} <= names
    assert res.rwset.writes == ()


def test_inventory_conservation():
    rng = random.Random(5)
    vendors, products = 4, 2
    c = small_world(vendors, products, inventory=500)
    total0 = sum(c.scm_get(f"I/{v}/{p}")["quantity"] for v in range(vendors) for p in range(products))
    for i in range(6):
        b, s = rng.sample(range(vendors), 2)
        c.run("scm", "create_contract", f"c{i}", b, s, rng.randrange(products))
    placed = delivered = 0
    status: dict[str, str] = {}
    qty: dict[str, int] = {}
    for n in range(80):
        open_ids = [o for o, st in status.items() if st != scm.DELIVERED]
        if open_ids and rng.random() < 0.5:
            o = rng.choice(open_ids)
            nxt = scm.SHIPPED if status[o] == scm.PLACED else scm.DELIVERED
            c.run("scm", "update_order", o, nxt)
            status[o] = nxt
            delivered += qty[o] if nxt == scm.DELIVERED else 0
        else:
            q = rng.randint(1, 20)
            try:
                c.run("scm", "place_order", f"o{n}", f"c{rng.randrange(6)}", q, 0)
            except ChaincodeError:
                continue
            status[f"o{n}"], qty[f"o{n}"] = scm.PLACED, q
            placed += q
    total = sum((c.scm_get(f"I/{v}/{p}") or {"quantity": 0})["quantity"]
                for v in range(vendors) for p in range(products))
    assert total == total0 - placed + delivered
    assert Counter(status.values())[scm.DELIVERED] > 0
