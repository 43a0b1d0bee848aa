"""Deterministic chaincode execution against a state view.

A chaincode function receives a :class:`TxContext`, reads and writes keys in
its own namespace through it, and returns result bytes. The context records
every ``(key, version)`` consulted and every pending write, and turns them
into a :class:`~streamledger.ledger.ReadWriteSet` afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Protocol

from ..ledger import Key, ReadWriteSet


class ChaincodeError(Exception):
    """Chaincode-level failure: the proposal produces no write set."""


@dataclass(frozen=True)
class Proposal:
    chaincode_id: str
    function: str
    args: tuple[bytes, ...]
    client_id: str

    @property
    def tx_args(self) -> tuple[bytes, ...]:
        return (self.function.encode(),) + self.args


class StateView(Protocol):
    def get(self, key: Key): ...  # -> StateEntry | None

    def snapshot_read(self, keys: Iterable[Key]) -> list[tuple[Key, int, bytes | None]]: ...


class TxContext:
    def __init__(self, state: StateView, namespace: str) -> None:
        self._state = state
        self.namespace = namespace
        self._reads: dict[Key, int] = {}
        self._read_values: dict[Key, bytes | None] = {}
        self._writes: dict[Key, bytes | None] = {}

    def _key(self, name: str | bytes) -> Key:
        return Key(self.namespace, name.encode() if isinstance(name, str) else name)

    def get(self, name: str | bytes) -> bytes | None:
        key = self._key(name)
        if key in self._writes:
            return self._writes[key]
        if key in self._read_values:
            return self._read_values[key]
        entry = self._state.get(key)
        if entry is None:
            self._reads[key], self._read_values[key] = 0, None
        else:
            self._reads[key], self._read_values[key] = entry.version, entry.value
        return self._read_values[key]

    def get_many(self, names: Iterable[str | bytes]) -> list[bytes | None]:
        keys = [self._key(n) for n in names]
        missing = [k for k in keys if k not in self._writes and k not in self._read_values]
        if missing:
            for key, version, value in self._state.snapshot_read(missing):
                self._reads[key], self._read_values[key] = version, value
        return [self._writes[k] if k in self._writes else self._read_values[k] for k in keys]

    def put(self, name: str | bytes, value: bytes) -> None:
        self._writes[self._key(name)] = bytes(value)

    def delete(self, name: str | bytes) -> None:
        self._writes[self._key(name)] = None

    def rwset(self) -> ReadWriteSet:
        return ReadWriteSet.build(self._reads, self._writes)


Function = Callable[[TxContext, tuple[bytes, ...]], bytes]


class Chaincode:
    """A named set of functions sharing one key namespace."""

    chaincode_id: str = ""
    functions: dict[str, Function]

    def invoke(self, ctx: TxContext, function: str, args: tuple[bytes, ...]) -> bytes:
        fn = self.functions.get(function)
        if fn is None:
            raise ChaincodeError(f"{self.chaincode_id}: unknown function {function!r}")
        return fn(ctx, args)


@dataclass(frozen=True)
class ExecutionResult:
    rwset: ReadWriteSet
    result: bytes


class Registry:
    def __init__(self, chaincodes: Iterable[Chaincode] = ()) -> None:
        self._by_id: dict[str, Chaincode] = {}
        for cc in chaincodes:
            self.register(cc)

    def register(self, cc: Chaincode) -> None:
        self._by_id[cc.chaincode_id] = cc

    def __contains__(self, chaincode_id: str) -> bool:
        return chaincode_id in self._by_id

    def execute(self, proposal: Proposal, state: StateView) -> ExecutionResult:
        cc = self._by_id.get(proposal.chaincode_id)
        if cc is None:
            raise ChaincodeError(f"chaincode {proposal.chaincode_id!r} not registered")
        ctx = TxContext(state, cc.chaincode_id)
        result = cc.invoke(ctx, proposal.function, proposal.args)
        return ExecutionResult(ctx.rwset(), result)


def default_registry() -> Registry:
    from .kv import KVChaincode
    from .scm import SCMChaincode

    return Registry([KVChaincode(), SCMChaincode()])


def execute(proposal: Proposal, state: StateView, registry: Registry | None = None) -> ExecutionResult:
    return (registry or default_registry()).execute(proposal, state)


__all__ = [
    "ChaincodeError",
    "Chaincode",
    "ExecutionResult",
    "Proposal",
    "Registry",
    "TxContext",
    "default_registry",
    "execute",
]
