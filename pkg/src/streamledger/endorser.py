"""Endorsement: execute proposals, sign read/write sets, assemble and check transactions.

Signatures are Ed25519 over canonical bytes. A ``null`` crypto suite swaps in
constant fake signatures so benchmarks can separate signature cost from
pipeline structure; it provides no security.
"""
from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .chaincode import ChaincodeError, Proposal, Registry, default_registry
from .ledger import (
    MalformedTransaction,
    Transaction,
    client_signing_bytes,
    deserialize_rwset,
    serialize_rwset,
)

REAL, NULL = "real", "null"
NULL_SIGNATURE = bytes(64)

_RAW = dict(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)


class EndorsementRefused(Exception):
    """The endorser would not sign (chaincode failure or not hosting the chaincode)."""


class AssemblyError(Exception):
    """Endorsements cannot be combined into a transaction."""


class EndorsementDivergence(AssemblyError):
    """Endorsers returned different read/write sets; the client may retry."""


@dataclass
class Identity:
    """A network member: peers sign endorsements, clients sign transactions."""

    id: str
    public_key: bytes
    _private: Ed25519PrivateKey | None = field(default=None, repr=False)

    @classmethod
    def generate(cls, ident: str) -> "Identity":
        sk = Ed25519PrivateKey.generate()
        return cls(ident, sk.public_key().public_bytes(**_RAW), sk)

    @classmethod
    def from_private_bytes(cls, ident: str, raw: bytes) -> "Identity":
        sk = Ed25519PrivateKey.from_private_bytes(raw)
        return cls(ident, sk.public_key().public_bytes(**_RAW), sk)

    def private_bytes(self) -> bytes:
        if self._private is None:
            raise ValueError(f"{self.id}: no private key")
        return self._private.private_bytes(
            serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
            serialization.NoEncryption())

    def sign(self, data: bytes, crypto: str = REAL) -> bytes:
        if crypto == NULL:
            return NULL_SIGNATURE
        if self._private is None:
            raise ValueError(f"{self.id}: cannot sign without a private key")
        return self._private.sign(data)


EndorserIdentity = Identity


class Membership:
    """Known identities and their verification keys."""

    def __init__(self, identities: Iterable[Identity] = (), crypto: str = REAL) -> None:
        if crypto not in (REAL, NULL):
            raise ValueError(f"unknown crypto suite {crypto!r}")
        self.crypto = crypto
        self._keys: dict[str, bytes] = {}
        self._verifiers: dict[str, Ed25519PublicKey] = {}
        self._lock = threading.Lock()
        for ident in identities:
            self.add(ident.id, ident.public_key)

    def add(self, ident: str, public_key: bytes) -> None:
        with self._lock:
            self._keys[ident] = public_key
            self._verifiers[ident] = Ed25519PublicKey.from_public_bytes(public_key)

    def __contains__(self, ident: str) -> bool:
        return ident in self._keys

    def ids(self) -> list[str]:
        return list(self._keys)

    def public_key(self, ident: str) -> bytes:
        return self._keys[ident]

    def verify(self, ident: str, data: bytes, signature: bytes) -> bool:
        verifier = self._verifiers.get(ident)
        if verifier is None:
            return False
        if self.crypto == NULL:
            return signature == NULL_SIGNATURE
        try:
            verifier.verify(signature, data)
        except InvalidSignature:
            return False
        return True


def write_identities(path: str | os.PathLike, identities: Iterable[Identity]) -> None:
    """Bootstrap file: one ``id, hex public key`` per line."""
    lines = [f"{i.id}, {i.public_key.hex()}\n" for i in identities]
    Path(path).write_text("".join(lines))


def read_identities(path: str | os.PathLike) -> list[Identity]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        ident, sep, key_hex = line.partition(",")
        if not sep:
            raise ValueError(f"{path}:{n}: expected 'id, hexkey'")
        out.append(Identity(ident.strip(), bytes.fromhex(key_hex.strip())))
    return out


@dataclass(frozen=True)
class EndorsementPolicy:
    """At least ``k`` of the named ``endorsers`` must sign."""

    k: int
    endorsers: tuple[str, ...]

    def __post_init__(self) -> None:
        if not 1 <= self.k <= len(self.endorsers):
            raise ValueError(f"policy needs 1 <= k <= n, got k={self.k} n={len(self.endorsers)}")

    @property
    def n(self) -> int:
        return len(self.endorsers)


@dataclass(frozen=True)
class Endorsement:
    endorser_id: str
    rwset_bytes: bytes
    signature: bytes
    result: bytes = b""


class Endorser:
    """Executes proposals against a peer's state and signs the outcome."""

    def __init__(self, identity: Identity, state, registry: Registry | None = None,
                 crypto: str = REAL,
                 wait_height: Callable[[int, float], bool] | None = None) -> None:
        self.identity = identity
        self.state = state
        self.registry = registry or default_registry()
        self.crypto = crypto
        self._wait_height = wait_height

    @property
    def id(self) -> str:
        return self.identity.id

    def endorse(self, proposal: Proposal, min_seq: int = 0, timeout: float = 5.0) -> Endorsement:
        """Execute and sign. ``min_seq`` makes the endorser catch up to the caller's last commit."""
        if min_seq and self._wait_height is not None:
            self._wait_height(min_seq, timeout)
        if proposal.chaincode_id not in self.registry:
            raise EndorsementRefused(f"{self.id} does not host {proposal.chaincode_id!r}")
        try:
            res = self.registry.execute(proposal, self.state)
        except ChaincodeError as exc:
            raise EndorsementRefused(str(exc)) from exc
        rw = serialize_rwset(res.rwset)
        return Endorsement(self.id, rw, self.identity.sign(rw, self.crypto), res.result)


def assemble_tx(proposal: Proposal, endorsements: Sequence[Endorsement], policy: EndorsementPolicy,
                client: Identity, crypto: str = REAL, tx_id: bytes | None = None,
                submit_ts: int | None = None) -> Transaction:
    if not endorsements:
        raise AssemblyError("no endorsements")
    rw = endorsements[0].rwset_bytes
    if any(e.rwset_bytes != rw for e in endorsements[1:]):
        raise EndorsementDivergence("endorsers disagree on the read/write set")
    signers = {e.endorser_id for e in endorsements if e.endorser_id in policy.endorsers}
    if len(signers) < policy.k:
        raise AssemblyError(f"policy needs {policy.k} endorsements, have {len(signers)}")
    unsigned = Transaction(
        tx_id=tx_id if tx_id is not None else os.urandom(16),
        chaincode_id=proposal.chaincode_id,
        args=proposal.tx_args,
        rwset=deserialize_rwset(rw),
        endorsements=tuple((e.endorser_id, e.signature) for e in endorsements),
        client_id=client.id,
        client_sig=b"",
        submit_ts=time.time_ns() if submit_ts is None else submit_ts,
    )
    sig = client.sign(client_signing_bytes(unsigned), crypto)
    return Transaction(unsigned.tx_id, unsigned.chaincode_id, unsigned.args, unsigned.rwset,
                       unsigned.endorsements, unsigned.client_id, sig, unsigned.submit_ts)


def verify_endorsement(tx: Transaction, policy: EndorsementPolicy, membership: Membership) -> bool:
    """Client signature valid and at least ``k`` distinct policy endorsers signed the rwset."""
    try:
        rw = serialize_rwset(tx.rwset)
        signing = client_signing_bytes(tx)
    except (MalformedTransaction, ValueError):
        return False
    if not membership.verify(tx.client_id, signing, tx.client_sig):
        return False
    good: set[str] = set()
    for endorser_id, sig in tx.endorsements:
        if endorser_id in good or endorser_id not in policy.endorsers:
            continue
        if membership.verify(endorser_id, rw, sig):
            good.add(endorser_id)
            if len(good) >= policy.k:
                return True
    return False
