"""Deterministic operation streams for the YCSB-like and SCM benchmarks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..chaincode import Proposal, kv, scm

YCSB, SCM = "ycsb", "scm"

PRESETS = {
    "ycsb90": dict(kind=YCSB, op_mix={"insert": 0.9, "read": 0.1}),
    "ycsb50": dict(kind=YCSB, op_mix={"read": 0.5, "update": 0.5}),
    "scm95": dict(kind=SCM, tx_fraction=0.95),
    "scm99": dict(kind=SCM, tx_fraction=0.99),
}

# share of each transactional SCM operation
SCM_TX_MIX = {"place_order": 0.5, "update_order": 0.4, "create_contract": 0.1}
ANALYTICS = ("days_of_supply", "bullwhip")


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str
    op_mix: dict[str, float] = field(default_factory=dict)
    key_space: int = 10_000
    working_set_fraction: float = 1.0
    value_size: int = 1024
    total_ops: int = 10_000
    clients: int = 1
    seed: int = 0
    # SCM scale
    tx_fraction: float = 0.95
    vendors: int = 50
    products: int = 500
    contracts: int = 6000
    initial_inventory: int = 1_000_000

    def __post_init__(self) -> None:
        if self.kind not in (YCSB, SCM):
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.total_ops <= 0 or self.clients <= 0:
            raise ValueError("total_ops and clients must be positive")
        if not 0.0 < self.working_set_fraction <= 1.0:
            raise ValueError("working_set_fraction must be in (0, 1]")
        if self.kind == SCM:
            if not 0.0 <= self.tx_fraction <= 1.0:
                raise ValueError("tx_fraction must be in [0, 1]")
            object.__setattr__(self, "op_mix", scm_op_mix(self.tx_fraction))
        if not math.isclose(sum(self.op_mix.values()), 1.0, abs_tol=1e-9):
            raise ValueError(f"op_mix fractions must sum to 1, got {self.op_mix}")


def scm_op_mix(tx_fraction: float) -> dict[str, float]:
    mix = {op: tx_fraction * share for op, share in SCM_TX_MIX.items()}
    mix.update({op: (1.0 - tx_fraction) / 2 for op in ANALYTICS})
    return mix


def preset(name: str, total_ops: int = 10_000, clients: int = 1, seed: int = 0, **overrides) -> WorkloadSpec:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown workload {name!r}; choose from {sorted(PRESETS)}") from None
    return WorkloadSpec(**{**base, "total_ops": total_ops, "clients": clients, "seed": seed, **overrides})


@dataclass(frozen=True)
class Operation:
    index: int
    client: int
    op_type: str
    proposal: Proposal


def client_of(index: int, clients: int) -> int:
    return index % clients


def exact_counts(mix: dict[str, float], total: int) -> dict[str, int]:
    """Largest-remainder rounding of ``mix`` fractions to integer counts summing to ``total``."""
    names = sorted(mix)
    raw = np.array([mix[n] * total for n in names])
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    for i in np.argsort(-(raw - counts), kind="stable")[:short]:
        counts[i] += 1
    return dict(zip(names, counts.tolist()))


def _shuffled_types(rng: np.random.Generator, mix: dict[str, float], total: int) -> list[str]:
    types = [name for name, n in exact_counts(mix, total).items() for _ in range(n)]
    order = rng.permutation(total)
    return [types[i] for i in order]


# -- YCSB ----------------------------------------------------------------------

def working_set(spec: WorkloadSpec) -> np.ndarray:
    """The fixed key subset operations are drawn from."""
    rng = np.random.default_rng([spec.seed, 1])
    size = max(1, round(spec.working_set_fraction * spec.key_space))
    if size >= spec.key_space:
        return np.arange(spec.key_space)
    return np.sort(rng.choice(spec.key_space, size=size, replace=False))


def gen_ycsb(spec: WorkloadSpec) -> list[Operation]:
    if spec.kind != YCSB:
        raise ValueError("gen_ycsb needs a YCSB spec")
    rng = np.random.default_rng([spec.seed, 2])
    keys = working_set(spec)
    picks = keys[rng.integers(0, len(keys), size=spec.total_ops)]
    ops = []
    for i, (op_type, k) in enumerate(zip(_shuffled_types(rng, spec.op_mix, spec.total_ops), picks)):
        name = kv.key_name(int(k)).encode()
        if op_type == "read":
            args: tuple[bytes, ...] = (name,)
        else:
            args = (name, rng.bytes(spec.value_size))
        c = client_of(i, spec.clients)
        ops.append(Operation(i, c, op_type, Proposal(kv.CHAINCODE_ID, op_type, args, f"client{c}")))
    return ops


def ycsb_load(spec: WorkloadSpec, chunk: int = 200) -> list[Proposal]:
    """Bulk-load proposals populating the whole key space."""
    return [Proposal(kv.CHAINCODE_ID, "load",
                     tuple(str(x).encode() for x in (start, min(chunk, spec.key_space - start),
                                                     spec.value_size, spec.seed)), "client0")
            for start in range(0, spec.key_space, chunk)]


# -- SCM -----------------------------------------------------------------------

def scm_dataset(spec: WorkloadSpec) -> scm.Dataset:
    return scm.bootstrap_dataset(spec.seed, spec.vendors, spec.products, spec.contracts,
                                 spec.initial_inventory)


def scm_load(spec: WorkloadSpec, chunks: int = 25) -> list[Proposal]:
    params = (spec.seed, spec.vendors, spec.products, spec.contracts, spec.initial_inventory)
    return [Proposal(scm.CHAINCODE_ID, "load",
                     tuple(str(x).encode() for x in (*params, i, chunks)), "client0")
            for i in range(chunks)]


def gen_scm(spec: WorkloadSpec) -> tuple[scm.Dataset, list[Operation]]:
    """Bootstrap dataset plus the operation stream.

    Order ids are scoped by client, and updates only target orders that the
    same client placed earlier, so a single client's stream never refers to an
    order it has not created.
    """
    if spec.kind != SCM:
        raise ValueError("gen_scm needs an SCM spec")
    data = scm_dataset(spec)
    rng = np.random.default_rng([spec.seed, 3])
    contracts = data.contracts
    placed: dict[int, list[list]] = {c: [] for c in range(spec.clients)}  # [order_id, status]
    counters = {c: 0 for c in range(spec.clients)}
    ops = []
    for i, op_type in enumerate(_shuffled_types(rng, spec.op_mix, spec.total_ops)):
        c = client_of(i, spec.clients)
        open_orders = [o for o in placed[c] if o[1] != scm.DELIVERED]
        if op_type == "update_order" and not open_orders:
            op_type = "place_order"
        if op_type == "place_order":
            cid = contracts[int(rng.integers(len(contracts)))][0]
            oid = f"{c}-{counters[c]}"
            counters[c] += 1
            placed[c].append([oid, scm.PLACED])
            args = (oid.encode(), cid.encode(), str(int(rng.integers(1, 101))).encode(),
                    str(i // 100).encode())
        elif op_type == "update_order":
            order = open_orders[0]
            order[1] = scm.SHIPPED if order[1] == scm.PLACED else scm.DELIVERED
            args = (order[0].encode(), order[1].encode())
        elif op_type == "create_contract":
            buyer, seller = (int(x) for x in rng.choice(spec.vendors, size=2, replace=False))
            cid = f"n{c}-{counters[c]}"
            counters[c] += 1
            args = (cid.encode(), str(buyer).encode(), str(seller).encode(),
                    str(int(rng.integers(spec.products))).encode())
        elif op_type == "days_of_supply":
            _, _, seller, product = contracts[int(rng.integers(len(contracts)))]
            args = (str(seller).encode(), str(product).encode())
        else:
            args = ()
        ops.append(Operation(i, c, op_type, Proposal(scm.CHAINCODE_ID, op_type, args, f"client{c}")))
    return data, ops


def generate(spec: WorkloadSpec) -> tuple[list[Proposal], list[Operation]]:
    """``(bulk-load proposals, measured operations)`` for either workload kind."""
    if spec.kind == YCSB:
        return ycsb_load(spec), gen_ycsb(spec)
    return scm_load(spec), gen_scm(spec)[1]
