"""Shared builders for tests."""
from __future__ import annotations

import os

from streamledger.chaincode import Proposal
from streamledger.endorser import (
    NULL,
    REAL,
    EndorsementPolicy,
    Endorser,
    Identity,
    Membership,
    assemble_tx,
)
from streamledger.endorser import verify_endorsement
from streamledger.ledger import Key, ReadWriteSet, Transaction, client_signing_bytes, serialize_rwset
from streamledger.statedb import StateDB


def kv_key(name: str | bytes, ns: str = "kv") -> Key:
    return Key(ns, name.encode() if isinstance(name, str) else name)


def raw_tx(reads=(), writes=(), tx_id: bytes | None = None, endorser: str = "peer0",
           client: str = "client0", args=(b"insert",)) -> Transaction:
    """An unsigned-looking transaction, for tests that only care about shape."""
    return Transaction(tx_id or os.urandom(16), "kv", tuple(args),
                       ReadWriteSet(tuple(reads), tuple(writes)), ((endorser, bytes(64)),),
                       client, bytes(64), 1)


class Crew:
    """Peers, clients, a shared state and helpers to produce signed transactions."""

    def __init__(self, peers: int = 1, clients: int = 1, crypto: str = REAL) -> None:
        self.crypto = crypto
        self.peers = [Identity.generate(f"peer{i}") for i in range(peers)]
        self.clients = [Identity.generate(f"client{i}") for i in range(clients)]
        self.membership = Membership(self.peers + self.clients, crypto)
        self.policy = EndorsementPolicy(1, tuple(p.id for p in self.peers))
        self.policies = {"kv": self.policy, "scm": self.policy}
        self.state = StateDB()
        self.endorsers = [Endorser(p, self.state, crypto=crypto) for p in self.peers]

    @property
    def public_keys(self) -> dict[str, bytes]:
        return {i: self.membership.public_key(i) for i in self.membership.ids()}

    @property
    def replay_policies(self) -> dict:
        return {cc: (p.k, p.endorsers) for cc, p in self.policies.items()}

    def verifier(self):
        def verify(tx: Transaction) -> bool:
            policy = self.policies.get(tx.chaincode_id)
            return policy is not None and verify_endorsement(tx, policy, self.membership)
        return verify

    def signed(self, reads=(), writes=(), client: int = 0, tx_id: bytes | None = None,
               cc: str = "kv") -> Transaction:
        """A properly signed transaction around an arbitrary read/write set."""
        rw = ReadWriteSet(tuple(reads), tuple(writes))
        raw = serialize_rwset(rw)
        ends = tuple((p.id, p.sign(raw, self.crypto)) for p in self.peers[:1])
        ident = self.clients[client]
        unsigned = Transaction(tx_id or os.urandom(16), cc, (b"update",), rw, ends, ident.id, b"", 1)
        sig = ident.sign(client_signing_bytes(unsigned), self.crypto)
        return Transaction(unsigned.tx_id, cc, unsigned.args, rw, ends, ident.id, sig, 1)

    def tx(self, function: str, *args: bytes, cc: str = "kv", client: int = 0,
           state: StateDB | None = None, endorsers: int = 1) -> Transaction:
        prop = Proposal(cc, function, tuple(args), self.clients[client].id)
        eds = self.endorsers if state is None else [
            Endorser(p, state, crypto=self.crypto) for p in self.peers]
        ends = [e.endorse(prop) for e in eds[:endorsers]]
        return assemble_tx(prop, ends, self.policies[cc], self.clients[client], self.crypto)


# criterion number -> (passed, title, detail); filled by test_acceptance, printed by conftest
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}
