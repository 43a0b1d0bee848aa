"""Supply-chain chaincode: vendors, products, contracts, orders, inventories.

Key layout (namespace ``scm``)::

    V/{vendor}              vendor record; vendor ids are 0..n-1
    P/{product}             product record
    C/{contract}            {buyer, seller, product}
    O/{order}               {contract, quantity, status, ts}
    I/{vendor}/{product}    {quantity}
    OIDX/{vendor}/{side}    JSON list of order ids, side in {buy, sell}

Values are canonical JSON (sorted keys, no whitespace). Order scans go
through the ``OIDX`` index keys, so analytics and order placement contend on
them, and placement also contends on the seller's inventory key.
"""
from __future__ import annotations

import json
import math
import random
import statistics
from dataclasses import dataclass
from itertools import count

from . import Chaincode, ChaincodeError, TxContext

CHAINCODE_ID = "scm"

PLACED, SHIPPED, DELIVERED = "PLACED", "SHIPPED", "DELIVERED"
_NEXT_STATUS = {PLACED: SHIPPED, SHIPPED: DELIVERED}

DEMAND_WINDOW = 1000
INFINITE_SUPPLY = "inf"


def enc(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def dec(raw: bytes | None):
    return None if raw is None else json.loads(raw)


def vendor_key(v) -> str:
    return f"V/{v}"


def product_key(p) -> str:
    return f"P/{p}"


def contract_key(c) -> str:
    return f"C/{c}"


def order_key(o) -> str:
    return f"O/{o}"


def inventory_key(v, p) -> str:
    return f"I/{v}/{p}"


def index_key(v, side: str) -> str:
    return f"OIDX/{v}/{side}"


def _int_arg(raw: bytes, what: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ChaincodeError(f"{what} must be an integer") from None


# -- bootstrap dataset ---------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    vendors: int
    products: int
    contracts: tuple[tuple[str, int, int, int], ...]  # (id, buyer, seller, product)
    initial_inventory: int

    def writes(self) -> list[tuple[str, bytes]]:
        out: list[tuple[str, bytes]] = []
        out += [(vendor_key(v), enc({"id": v, "name": f"vendor-{v}"})) for v in range(self.vendors)]
        out += [(product_key(p), enc({"id": p, "name": f"product-{p}"})) for p in range(self.products)]
        stock = set()
        for cid, buyer, seller, product in self.contracts:
            out.append((contract_key(cid), enc({"buyer": buyer, "seller": seller, "product": product})))
            stock.add((seller, product))
        out += [(inventory_key(v, p), enc({"quantity": self.initial_inventory}))
                for v, p in sorted(stock)]
        return out


def bootstrap_dataset(seed: int, vendors: int = 50, products: int = 500, contracts: int = 6000,
                      initial_inventory: int = 1_000_000) -> Dataset:
    if vendors < 2 or products < 1 or contracts < 0:
        raise ValueError("need at least two vendors and one product")
    rng = random.Random(seed)
    rows = []
    for i in range(contracts):
        seller = rng.randrange(vendors)
        buyer = rng.randrange(vendors - 1)
        if buyer >= seller:
            buyer += 1
        rows.append((f"c{i}", buyer, seller, rng.randrange(products)))
    return Dataset(vendors, products, tuple(rows), initial_inventory)


# -- functions -------------------------------------------------------------------

def _load(ctx: TxContext, args: tuple[bytes, ...]) -> bytes:
    seed, vendors, products, contracts, inventory, chunk, chunks = (
        _int_arg(a, "load argument") for a in args)
    if not 0 <= chunk < chunks:
        raise ChaincodeError("chunk out of range")
    writes = bootstrap_dataset(seed, vendors, products, contracts, inventory).writes()
    per = math.ceil(len(writes) / chunks)
    part = writes[chunk * per:(chunk + 1) * per]
    for name, value in part:
        ctx.put(name, value)
    return str(len(part)).encode()


def _create_vendor(ctx: TxContext, args: tuple[bytes, ...]) -> bytes:
    vid, name = args
    vid_i = _int_arg(vid, "vendor id")
    if ctx.get(vendor_key(vid_i)) is not None:
        raise ChaincodeError("duplicate vendor")
    ctx.put(vendor_key(vid_i), enc({"id": vid_i, "name": name.decode()}))
    return b""


def _create_product(ctx: TxContext, args: tuple[bytes, ...]) -> bytes:
    pid, name = args
    pid_i = _int_arg(pid, "product id")
    if ctx.get(product_key(pid_i)) is not None:
        raise ChaincodeError("duplicate product")
    ctx.put(product_key(pid_i), enc({"id": pid_i, "name": name.decode()}))
    return b""


def _set_inventory(ctx: TxContext, args: tuple[bytes, ...]) -> bytes:
    v, p, qty = (_int_arg(a, "inventory argument") for a in args)
    if qty < 0:
        raise ChaincodeError("negative inventory")
    ctx.put(inventory_key(v, p), enc({"quantity": qty}))
    return b""


def _create_contract(ctx: TxContext, args: tuple[bytes, ...]) -> bytes:
    cid_raw, buyer_raw, seller_raw, product_raw = args
    cid = cid_raw.decode()
    buyer = _int_arg(buyer_raw, "buyer")
    seller = _int_arg(seller_raw, "seller")
    product = _int_arg(product_raw, "product")
    if buyer == seller:
        raise ChaincodeError("buyer and seller must differ")
    if ctx.get(vendor_key(buyer)) is None or ctx.get(vendor_key(seller)) is None:
        raise ChaincodeError("unknown vendor")
    if ctx.get(product_key(product)) is None:
        raise ChaincodeError("unknown product")
    if ctx.get(contract_key(cid)) is not None:
        raise ChaincodeError("duplicate contract id")
    ctx.put(contract_key(cid), enc({"buyer": buyer, "seller": seller, "product": product}))
    return b""


def _append_index(ctx: TxContext, name: str, order_id: str) -> None:
    ids = dec(ctx.get(name)) or []
    ids.append(order_id)
    ctx.put(name, enc(ids))


def _place_order(ctx: TxContext, args: tuple[bytes, ...]) -> bytes:
    oid_raw, cid_raw, qty_raw, day_raw = args
    oid, cid = oid_raw.decode(), cid_raw.decode()
    qty = _int_arg(qty_raw, "quantity")
    day = _int_arg(day_raw, "day")
    if qty <= 0:
        raise ChaincodeError("quantity must be positive")
    contract = dec(ctx.get(contract_key(cid)))
    if contract is None:
        raise ChaincodeError(f"no contract {cid}")
    if ctx.get(order_key(oid)) is not None:
        raise ChaincodeError("duplicate order id")
    seller, buyer, product = contract["seller"], contract["buyer"], contract["product"]
    inv_name = inventory_key(seller, product)
    stock = (dec(ctx.get(inv_name)) or {"quantity": 0})["quantity"]
    if stock < qty:
        raise ChaincodeError("insufficient inventory")
    ctx.put(inv_name, enc({"quantity": stock - qty}))
    ctx.put(order_key(oid), enc({"contract": cid, "quantity": qty, "status": PLACED, "ts": day}))
    _append_index(ctx, index_key(seller, "sell"), oid)
    _append_index(ctx, index_key(buyer, "buy"), oid)
    return b""


def _update_order(ctx: TxContext, args: tuple[bytes, ...]) -> bytes:
    oid_raw, status_raw = args
    oid, status = oid_raw.decode(), status_raw.decode()
    order = dec(ctx.get(order_key(oid)))
    if order is None:
        raise ChaincodeError(f"no order {oid}")
    if _NEXT_STATUS.get(order["status"]) != status:
        raise ChaincodeError(f"illegal transition {order['status']} -> {status}")
    order["status"] = status
    ctx.put(order_key(oid), enc(order))
    if status == DELIVERED:
        contract = dec(ctx.get(contract_key(order["contract"])))
        if contract is None:
            raise ChaincodeError("order references missing contract")
        inv_name = inventory_key(contract["buyer"], contract["product"])
        stock = (dec(ctx.get(inv_name)) or {"quantity": 0})["quantity"]
        ctx.put(inv_name, enc({"quantity": stock + order["quantity"]}))
    return b""


def _orders(ctx: TxContext, ids: list[str]) -> list[dict]:
    return [dec(raw) for raw in ctx.get_many([order_key(o) for o in ids])]


def days_of_supply_value(inventory: int, orders: list[tuple[int, int, bool]]) -> float:
    """``orders`` are ``(quantity, day, counts_toward_demand)`` for the demand window."""
    if not orders:
        return math.inf
    days = max(d for _, d, _ in orders) - min(d for _, d, _ in orders) + 1
    demand = sum(q for q, _, hit in orders if hit)
    if demand == 0:
        return math.inf
    return inventory / (demand / days)


def _days_of_supply(ctx: TxContext, args: tuple[bytes, ...]) -> bytes:
    vendor = _int_arg(args[0], "vendor")
    product = _int_arg(args[1], "product")
    if ctx.get(vendor_key(vendor)) is None or ctx.get(product_key(product)) is None:
        raise ChaincodeError("unknown vendor or product")
    stock = (dec(ctx.get(inventory_key(vendor, product))) or {"quantity": 0})["quantity"]
    ids = (dec(ctx.get(index_key(vendor, "sell"))) or [])[-DEMAND_WINDOW:]
    orders = _orders(ctx, ids)
    cids = sorted({o["contract"] for o in orders})
    contracts = {c: dec(raw) for c, raw in zip(cids, ctx.get_many([contract_key(c) for c in cids]))}
    window = [(o["quantity"], o["ts"], contracts[o["contract"]]["product"] == product) for o in orders]
    value = days_of_supply_value(stock, window)
    return INFINITE_SUPPLY.encode() if math.isinf(value) else repr(value).encode()


def coefficient_of_variation(xs: list[int]) -> float | None:
    if not xs:
        return None
    mean = statistics.fmean(xs)
    if mean == 0:
        return None
    return statistics.pstdev(xs) / mean


def bullwhip_value(per_vendor: list[tuple[list[int], list[int]]]) -> float:
    """Mean over vendors of cv(out)/cv(in); ``per_vendor`` holds (out_qtys, in_qtys)."""
    ratios = []
    for out_q, in_q in per_vendor:
        cv_out, cv_in = coefficient_of_variation(out_q), coefficient_of_variation(in_q)
        if cv_out is not None and cv_in:
            ratios.append(cv_out / cv_in)
    if not ratios:
        raise ChaincodeError("no vendor has a defined bullwhip ratio")
    return statistics.fmean(ratios)


def _bullwhip(ctx: TxContext, args: tuple[bytes, ...]) -> bytes:
    per_vendor = []
    for v in count():
        if ctx.get(vendor_key(v)) is None:
            break
        buy_ids = dec(ctx.get(index_key(v, "buy"))) or []
        sell_ids = dec(ctx.get(index_key(v, "sell"))) or []
        out_q = [o["quantity"] for o in _orders(ctx, buy_ids)]
        in_q = [o["quantity"] for o in _orders(ctx, sell_ids)]
        per_vendor.append((out_q, in_q))
    return repr(bullwhip_value(per_vendor)).encode()


class SCMChaincode(Chaincode):
    chaincode_id = CHAINCODE_ID

    def __init__(self) -> None:
        self.functions = {
            "load": _load,
            "create_vendor": _create_vendor,
            "create_product": _create_product,
            "set_inventory": _set_inventory,
            "create_contract": _create_contract,
            "place_order": _place_order,
            "update_order": _update_order,
            "days_of_supply": _days_of_supply,
            "bullwhip": _bullwhip,
        }
