"""Serial replay of a ledger transcript.

A deliberately simple re-execution of validation: one thread, a plain dict for
state, signatures checked directly against the bootstrap identities. It shares
only the serialization code with the live pipeline, so agreement between the
two is meaningful evidence that the pipeline's concurrency changes nothing.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from .ledger import (
    LedgerRecord,
    MalformedTransaction,
    client_signing_bytes,
    decode_record,
    deserialize_tx,
    iter_frames,
    serialize_rwset,
    state_digest,
    verify_chain,
    verify_chain_bytes,
)

NULL_SIG = bytes(64)


@dataclass
class ReplayResult:
    flags: list[bool]
    recorded: list[bool]
    digest: str
    chain_ok: bool
    state: dict = field(repr=False, default_factory=dict)

    @property
    def mismatches(self) -> list[int]:
        """Seqs whose recorded validity flag differs from the replayed one."""
        return [i + 1 for i, (a, b) in enumerate(zip(self.flags, self.recorded)) if a != b]

    @property
    def ok(self) -> bool:
        return self.chain_ok and not self.mismatches and len(self.flags) == len(self.recorded)


def read_ledger(path: str | Path) -> list[LedgerRecord]:
    data = Path(path).read_bytes()
    return [decode_record(f) for _, f in iter_frames(data)]


def _check(keys: dict[str, bytes], ident: str, data: bytes, sig: bytes, crypto: str) -> bool:
    raw = keys.get(ident)
    if raw is None:
        return False
    if crypto == "null":
        return sig == NULL_SIG
    try:
        Ed25519PublicKey.from_public_bytes(raw).verify(sig, data)
        return True
    except InvalidSignature:
        return False


def replay(records: list[LedgerRecord], public_keys: dict[str, bytes],
           policies: dict[str, tuple[int, tuple[str, ...]]], crypto: str = "real") -> ReplayResult:
    """Re-derive every validity flag and the final state from ``records``.

    ``policies`` maps chaincode id to ``(k, endorser ids)``.
    """
    state: dict = {}  # Key -> (version, value)
    seen: set[bytes] = set()
    flags = []
    for seq, rec in enumerate(records, start=1):
        try:
            tx = deserialize_tx(rec.tx_bytes)
        except (MalformedTransaction, ValueError):
            flags.append(False)
            continue
        ok = tx.tx_id not in seen
        seen.add(tx.tx_id)
        policy = policies.get(tx.chaincode_id)
        if ok and policy is None:
            ok = False
        if ok:
            ok = _check(public_keys, tx.client_id, client_signing_bytes(tx), tx.client_sig, crypto)
        if ok:
            k, allowed = policy
            rw = serialize_rwset(tx.rwset)
            signers = {e for e, sig in tx.endorsements
                       if e in allowed and _check(public_keys, e, rw, sig, crypto)}
            ok = len(signers) >= k
        if ok:
            ok = all(state.get(key, (0, None))[0] == version for key, version in tx.rwset.reads)
        if ok:
            for key, value in tx.rwset.writes:
                if value is None:
                    state.pop(key, None)
                else:
                    state[key] = (seq, value)
        flags.append(ok)
    digest = state_digest((k, v, val) for k, (v, val) in state.items())
    return ReplayResult(flags, [r.valid for r in records], digest, verify_chain(records), state)


def parse_kv_file(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: expected key=value, got {line!r}")
            out[key.strip()] = value.strip()
    return out


def parse_policy(text: str) -> tuple[int, tuple[str, ...]]:
    """``"2:peer0,peer1"`` -> ``(2, ("peer0", "peer1"))``."""
    k, _, ids = text.partition(":")
    return int(k), tuple(i.strip() for i in ids.split(",") if i.strip())


def load_context(ledger_path: str | Path) -> tuple[dict[str, bytes], dict, str]:
    """Find ``identities.txt`` and ``network.conf`` next to the ledger or above it."""
    here = Path(ledger_path).resolve().parent
    for d in (here, *here.parents):
        ids, conf = d / "identities.txt", d / "network.conf"
        if ids.exists() and conf.exists():
            keys = {}
            for line in ids.read_text().splitlines():
                if line.strip() and not line.startswith("#"):
                    ident, _, hexkey = line.partition(",")
                    keys[ident.strip()] = bytes.fromhex(hexkey.strip())
            cfg = parse_kv_file(conf)
            policies = {k[len("policy."):]: parse_policy(v) for k, v in cfg.items() if k.startswith("policy.")}
            return keys, policies, cfg.get("crypto", "real")
    raise FileNotFoundError(f"no identities.txt/network.conf found above {ledger_path}")


def replay_file(path: str | Path) -> ReplayResult:
    keys, policies, crypto = load_context(path)
    return replay(read_ledger(path), keys, policies, crypto)


@dataclass
class VerifyReport:
    ok: bool
    records: int
    reason: str = ""
    flags_checked: bool = False


def verify_file(path: str | Path, check_flags: bool = True) -> VerifyReport:
    """Chain check of a ledger file, plus a flag audit when the network context is found.

    The validity byte sits outside the hash chain, so a chain check alone
    cannot see it change from 0 to 1; re-deriving the flags closes that gap.
    """
    data = Path(path).read_bytes()
    if not verify_chain_bytes(data):
        return VerifyReport(False, 0, "hash chain broken or file not record-aligned")
    records = [decode_record(f) for _, f in iter_frames(data)]
    if not check_flags:
        return VerifyReport(True, len(records))
    try:
        keys, policies, crypto = load_context(path)
    except FileNotFoundError:
        return VerifyReport(True, len(records), "no network context; validity flags not audited")
    res = replay(records, keys, policies, crypto)
    if res.mismatches:
        return VerifyReport(False, len(records), f"validity flag mismatch at seq {res.mismatches[:5]}", True)
    return VerifyReport(True, len(records), "", True)
