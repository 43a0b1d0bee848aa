"""Transaction and ledger record formats, canonical serialization, hash chain.

All integers are little-endian and fixed width; byte strings and text are
length-prefixed with a u32. The encoding is canonical: two structurally
equal values always produce identical bytes, which is what makes endorsement
signatures and the chain hash stable.

Ledger file record frame::

    [u32 total record length][u64 seq][u8 valid][32-byte chain hash][tx bytes]

``total record length`` counts the whole frame, including its own four bytes.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

GENESIS_HASH = bytes(32)
TX_ID_LEN = 16

RECORD_HEADER = struct.Struct("<IQB32s")
RECORD_HEADER_LEN = RECORD_HEADER.size  # 45

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

WRITE_VALUE = 0
WRITE_DELETE = 1


class MalformedTransaction(ValueError):
    """Raised when bytes do not decode to a well-formed, canonical transaction."""


@dataclass(frozen=True, order=True, slots=True)
class Key:
    namespace: str
    name: bytes

    def __post_init__(self) -> None:
        if not self.namespace:
            raise ValueError("key namespace must be non-empty")
        if "\x00" in self.namespace:
            raise ValueError("key namespace must not contain NUL")

    def to_bytes(self) -> bytes:
        return self.namespace.encode() + b"\x00" + self.name

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Key":
        ns, sep, name = raw.partition(b"\x00")
        if not sep:
            raise ValueError("encoded key lacks namespace separator")
        return cls(ns.decode(), name)

    def __str__(self) -> str:
        return f"{self.namespace}:{self.name.decode(errors='backslashreplace')}"


@dataclass(frozen=True, slots=True)
class ReadWriteSet:
    """Keys read (with the version seen) and keys written by one execution.

    ``writes`` values are ``None`` for deletions. Both lists are sorted by key
    and free of duplicates; the constructor enforces it.
    """

    reads: tuple[tuple[Key, int], ...] = ()
    writes: tuple[tuple[Key, bytes | None], ...] = ()

    def __post_init__(self) -> None:
        for name, items in (("reads", self.reads), ("writes", self.writes)):
            keys = [k for k, _ in items]
            for a, b in zip(keys, keys[1:]):
                if not a < b:
                    raise ValueError(f"rwset {name} not strictly sorted by key: {a} !< {b}")
        for _, version in self.reads:
            if version < 0:
                raise ValueError("negative read version")

    @classmethod
    def build(cls, reads: dict[Key, int], writes: dict[Key, bytes | None]) -> "ReadWriteSet":
        return cls(tuple(sorted(reads.items())), tuple(sorted(writes.items(), key=lambda kv: kv[0])))

    @property
    def is_read_only(self) -> bool:
        return not self.writes


@dataclass(frozen=True, slots=True)
class Transaction:
    tx_id: bytes
    chaincode_id: str
    args: tuple[bytes, ...]
    rwset: ReadWriteSet
    endorsements: tuple[tuple[str, bytes], ...]
    client_id: str
    client_sig: bytes
    submit_ts: int

    def __post_init__(self) -> None:
        if len(self.tx_id) != TX_ID_LEN:
            raise ValueError("tx_id must be 16 bytes")
        if not self.endorsements:
            raise ValueError("transaction needs at least one endorsement")

    @property
    def function(self) -> str:
        return self.args[0].decode() if self.args else ""


@dataclass(frozen=True, slots=True)
class LedgerRecord:
    seq: int
    valid: bool
    chain_hash: bytes
    tx_bytes: bytes = field(repr=False)


# -- primitive encoders -------------------------------------------------------

def _put_bytes(out: bytearray, b: bytes) -> None:
    out += _U32.pack(len(b))
    out += b


def _put_str(out: bytearray, s: str) -> None:
    _put_bytes(out, s.encode())


def _put_key(out: bytearray, key: Key) -> None:
    _put_str(out, key.namespace)
    _put_bytes(out, key.name)


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes) -> None:
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if n < 0 or end > len(self.buf):
            raise MalformedTransaction("truncated input")
        out = bytes(self.buf[self.pos:end])
        self.pos = end
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def text(self) -> str:
        try:
            return self.blob().decode()
        except UnicodeDecodeError as exc:
            raise MalformedTransaction("invalid utf-8") from exc

    def key(self) -> Key:
        try:
            return Key(self.text(), self.blob())
        except ValueError as exc:
            raise MalformedTransaction(str(exc)) from exc

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise MalformedTransaction("trailing bytes")


# -- rwset ---------------------------------------------------------------------

def serialize_rwset(rwset: ReadWriteSet) -> bytes:
    out = bytearray()
    out += _U32.pack(len(rwset.reads))
    for key, version in rwset.reads:
        _put_key(out, key)
        out += _U64.pack(version)
    out += _U32.pack(len(rwset.writes))
    for key, value in rwset.writes:
        _put_key(out, key)
        if value is None:
            out += _U8.pack(WRITE_DELETE)
        else:
            out += _U8.pack(WRITE_VALUE)
            _put_bytes(out, value)
    return bytes(out)


def _read_rwset(r: _Reader) -> ReadWriteSet:
    reads = []
    for _ in range(r.u32()):
        reads.append((r.key(), r.u64()))
    writes: list[tuple[Key, bytes | None]] = []
    for _ in range(r.u32()):
        key = r.key()
        kind = r.u8()
        if kind == WRITE_DELETE:
            writes.append((key, None))
        elif kind == WRITE_VALUE:
            writes.append((key, r.blob()))
        else:
            raise MalformedTransaction(f"unknown write kind {kind}")
    try:
        return ReadWriteSet(tuple(reads), tuple(writes))
    except ValueError as exc:
        raise MalformedTransaction(str(exc)) from exc


def deserialize_rwset(raw: bytes) -> ReadWriteSet:
    r = _Reader(raw)
    rw = _read_rwset(r)
    r.done()
    return rw


# -- transactions --------------------------------------------------------------

def _tx_body(tx: Transaction, with_client_sig: bool) -> bytes:
    out = bytearray()
    out += tx.tx_id
    _put_str(out, tx.chaincode_id)
    out += _U32.pack(len(tx.args))
    for a in tx.args:
        _put_bytes(out, a)
    _put_bytes(out, serialize_rwset(tx.rwset))
    out += _U32.pack(len(tx.endorsements))
    for endorser_id, sig in tx.endorsements:
        _put_str(out, endorser_id)
        _put_bytes(out, sig)
    _put_str(out, tx.client_id)
    if with_client_sig:
        _put_bytes(out, tx.client_sig)
    out += _U64.pack(tx.submit_ts)
    return bytes(out)


def serialize_tx(tx: Transaction) -> bytes:
    return _tx_body(tx, with_client_sig=True)


def client_signing_bytes(tx: Transaction) -> bytes:
    """Bytes the client signs: the full transaction minus its own signature."""
    return _tx_body(tx, with_client_sig=False)


def deserialize_tx(raw: bytes) -> Transaction:
    r = _Reader(raw)
    tx_id = r.take(TX_ID_LEN)
    chaincode_id = r.text()
    args = tuple(r.blob() for _ in range(r.u32()))
    rwset = deserialize_rwset(r.blob())
    endorsements = tuple((r.text(), r.blob()) for _ in range(r.u32()))
    client_id = r.text()
    client_sig = r.blob()
    submit_ts = r.u64()
    r.done()
    try:
        return Transaction(tx_id, chaincode_id, args, rwset, endorsements,
                           client_id, client_sig, submit_ts)
    except ValueError as exc:
        raise MalformedTransaction(str(exc)) from exc


def rwset_bytes_of(raw_tx: bytes) -> bytes:
    """Slice the embedded rwset blob out of a serialized transaction."""
    r = _Reader(raw_tx)
    r.take(TX_ID_LEN)
    r.blob()
    for _ in range(r.u32()):
        r.blob()
    return r.blob()


# -- hash chain ----------------------------------------------------------------

def chain_hash_fn(prev_hash: bytes, tx_bytes: bytes) -> bytes:
    h = hashlib.sha256(prev_hash)
    h.update(tx_bytes)
    return h.digest()


def encode_record(rec: LedgerRecord) -> bytes:
    total = RECORD_HEADER_LEN + len(rec.tx_bytes)
    return RECORD_HEADER.pack(total, rec.seq, 1 if rec.valid else 0, rec.chain_hash) + rec.tx_bytes


def decode_record(frame: bytes) -> LedgerRecord:
    if len(frame) < RECORD_HEADER_LEN:
        raise ValueError("short ledger record")
    total, seq, valid, chain_hash = RECORD_HEADER.unpack_from(frame)
    if total != len(frame):
        raise ValueError(f"record length field {total} != frame length {len(frame)}")
    if valid not in (0, 1):
        raise ValueError(f"bad validity byte {valid}")
    return LedgerRecord(seq, bool(valid), chain_hash, bytes(frame[RECORD_HEADER_LEN:]))


def iter_frames(buf: bytes, min_len: int = RECORD_HEADER_LEN) -> Iterator[tuple[int, bytes]]:
    """Yield ``(offset, frame)`` for each complete length-prefixed frame.

    Stops silently at the first frame that is torn or has an impossible length.
    """
    pos, n = 0, len(buf)
    while pos + 4 <= n:
        (total,) = _U32.unpack_from(buf, pos)
        if total < min_len or pos + total > n:
            return
        yield pos, bytes(buf[pos:pos + total])
        pos += total


def verify_chain(records: Sequence[LedgerRecord]) -> bool:
    prev = GENESIS_HASH
    for expected_seq, rec in enumerate(records, start=1):
        if rec.seq != expected_seq:
            return False
        prev = chain_hash_fn(prev, rec.tx_bytes)
        if rec.chain_hash != prev:
            return False
    return True


def verify_chain_bytes(buf: bytes) -> bool:
    """Check a raw ledger file image: every byte must belong to a valid record."""
    records = []
    consumed = 0
    for _, frame in iter_frames(buf):
        try:
            records.append(decode_record(frame))
        except ValueError:
            return False
        consumed += len(frame)
    if consumed != len(buf):
        return False
    return verify_chain(records)


# -- state digest ----------------------------------------------------------------

def encode_state_entry(key: Key, version: int, value: bytes) -> bytes:
    kb = key.to_bytes()
    return _U32.pack(len(kb)) + kb + _U64.pack(version) + _U32.pack(len(value)) + value


def state_digest(entries: Iterable[tuple[Key, int, bytes]]) -> str:
    """SHA256 hex digest of a state, independent of iteration order."""
    h = hashlib.sha256()
    for key, version, value in sorted(entries, key=lambda e: e[0]):
        h.update(encode_state_entry(key, version, value))
    return h.hexdigest()
