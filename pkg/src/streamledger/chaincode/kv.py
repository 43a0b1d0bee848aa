"""Key-value chaincode driven by the YCSB-like microbenchmark."""
from __future__ import annotations

import hashlib

from . import Chaincode, ChaincodeError, TxContext

CHAINCODE_ID = "kv"


def load_value(key_index: int, value_size: int, seed: int) -> bytes:
    """Deterministic filler value used by the bulk loader."""
    out = bytearray()
    block = f"{seed}:{key_index}".encode()
    while len(out) < value_size:
        block = hashlib.sha256(block).digest()
        out += block
    return bytes(out[:value_size])


def key_name(index: int) -> str:
    return f"user{index:08d}"


def _read(ctx: TxContext, args: tuple[bytes, ...]) -> bytes:
    (key,) = args
    value = ctx.get(key)
    return value if value is not None else b""


def _upsert(ctx: TxContext, args: tuple[bytes, ...]) -> bytes:
    key, value = args
    ctx.get(key)  # existence read: puts the key's version into the read set
    ctx.put(key, value)
    return b""


def _delete(ctx: TxContext, args: tuple[bytes, ...]) -> bytes:
    (key,) = args
    ctx.get(key)
    ctx.delete(key)
    return b""


def _load(ctx: TxContext, args: tuple[bytes, ...]) -> bytes:
    """Blind bulk write of ``count`` keys starting at ``start``."""
    start, count, value_size, seed = (int(a) for a in args)
    if count <= 0 or value_size < 0:
        raise ChaincodeError("bad load range")
    for i in range(start, start + count):
        ctx.put(key_name(i), load_value(i, value_size, seed))
    return str(count).encode()


class KVChaincode(Chaincode):
    chaincode_id = CHAINCODE_ID

    def __init__(self) -> None:
        self.functions = {
            "read": _read,
            "insert": _upsert,
            "update": _upsert,
            "delete": _delete,
            "load": _load,
        }
