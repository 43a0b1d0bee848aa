"""Length-prefixed frames over stream sockets.

Every message is ``[u32 length][u8 type][body]`` where ``length`` counts the
type byte plus the body. Bodies use the same little-endian fixed-width
conventions as the ledger format.
"""
from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum

_HDR = struct.Struct("<IB")
_U32 = struct.Struct("<I")
MAX_FRAME = 64 * 1024 * 1024


class Msg(IntEnum):
    SUBMIT = 1
    SUBMIT_ACK = 2
    FETCH = 3
    DELIVER = 4
    APPEND = 5
    APPEND_ACK = 6
    VOTE_REQ = 7
    VOTE_RESP = 8
    # peer-facing endpoints
    PROPOSE = 32
    PROPOSAL_RESP = 33
    SUBSCRIBE = 34
    ADMIN = 35
    ADMIN_RESP = 36


class ConnectionClosed(ConnectionError):
    pass


def encode_frame(kind: int, body: bytes = b"") -> bytes:
    return _HDR.pack(len(body) + 1, kind) + body


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionClosed("peer closed connection")
        got += k
    return bytes(buf)


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    length, kind = _HDR.unpack(recv_exact(sock, _HDR.size))
    if length < 1 or length > MAX_FRAME:
        raise ConnectionClosed(f"bad frame length {length}")
    return kind, recv_exact(sock, length - 1)


def recv_raw_frame(sock: socket.socket) -> bytes:
    """Receive a ``[u32 length][payload]`` frame that carries no type byte."""
    (length,) = _U32.unpack(recv_exact(sock, 4))
    if length > MAX_FRAME:
        raise ConnectionClosed(f"bad frame length {length}")
    return recv_exact(sock, length)


class Conn:
    """A socket with a send lock so several threads can write whole frames."""

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self._send_lock = threading.Lock()
        self.closed = False
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass

    @classmethod
    def connect(cls, addr: tuple[str, int], timeout: float | None = 2.0) -> "Conn":
        sock = socket.create_connection(addr, timeout=timeout)
        sock.settimeout(None)
        return cls(sock)

    def send(self, kind: int, body: bytes = b"") -> None:
        self.send_bytes(encode_frame(kind, body))

    def send_bytes(self, data: bytes) -> None:
        with self._send_lock:
            if self.closed:
                raise ConnectionClosed("connection closed")
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from exc

    def recv(self) -> tuple[int, bytes]:
        try:
            return recv_frame(self.sock)
        except OSError as exc:
            if isinstance(exc, ConnectionClosed):
                raise
            raise ConnectionClosed(str(exc)) from exc

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


# -- message bodies -----------------------------------------------------------

ACK_OK, ACK_NOT_LEADER, ACK_REJECTED = 0, 1, 2

FETCH_GET, FETCH_STREAM, FETCH_BLOCKS, FETCH_LAST = 0, 1, 2, 3

DELIVER_ENTRY, DELIVER_BLOCK, DELIVER_NOT_FOUND, DELIVER_RESTART = 0, 1, 2, 3

_SUBMIT_ACK = struct.Struct("<QBi")
_FETCH = struct.Struct("<QB")
_ENTRY_HDR = struct.Struct("<Q32sI")
_BLOCK_HDR = struct.Struct("<QBI")
_APPEND_HDR = struct.Struct("<QIQQQI")
_LOG_ENTRY_HDR = struct.Struct("<QI")
_APPEND_ACK = struct.Struct("<QIBQ")
_VOTE_REQ = struct.Struct("<QIQQ")
_VOTE_RESP = struct.Struct("<QIB")


@dataclass(frozen=True, slots=True)
class OrderedEntry:
    seq: int
    payload: bytes
    payload_hash: bytes


@dataclass(frozen=True, slots=True)
class Block:
    block_no: int
    entries: tuple[OrderedEntry, ...]
    cut_reason: str  # "size" | "timeout"


_CUT_CODES = {"size": 0, "timeout": 1}
_CUT_NAMES = {v: k for k, v in _CUT_CODES.items()}


def pack_submit_ack(seq: int, status: int, leader_hint: int) -> bytes:
    return _SUBMIT_ACK.pack(seq, status, leader_hint)


def unpack_submit_ack(body: bytes) -> tuple[int, int, int]:
    return _SUBMIT_ACK.unpack(body)


def pack_fetch(seq: int, kind: int) -> bytes:
    return _FETCH.pack(seq, kind)


def unpack_fetch(body: bytes) -> tuple[int, int]:
    return _FETCH.unpack(body)


def _pack_entry(e: OrderedEntry) -> bytes:
    return _ENTRY_HDR.pack(e.seq, e.payload_hash, len(e.payload)) + e.payload


def _unpack_entry(body: bytes, pos: int) -> tuple[OrderedEntry, int]:
    seq, h, n = _ENTRY_HDR.unpack_from(body, pos)
    pos += _ENTRY_HDR.size
    return OrderedEntry(seq, bytes(body[pos:pos + n]), h), pos + n


def pack_deliver_entry(e: OrderedEntry) -> bytes:
    return bytes([DELIVER_ENTRY]) + _pack_entry(e)


def pack_deliver_block(b: Block) -> bytes:
    parts = [bytes([DELIVER_BLOCK]), _BLOCK_HDR.pack(b.block_no, _CUT_CODES[b.cut_reason], len(b.entries))]
    parts += [_pack_entry(e) for e in b.entries]
    return b"".join(parts)


def pack_deliver_status(kind: int, seq: int = 0) -> bytes:
    return bytes([kind]) + struct.pack("<Q", seq)


def unpack_deliver(body: bytes) -> tuple[int, OrderedEntry | Block | int]:
    kind = body[0]
    if kind == DELIVER_ENTRY:
        return kind, _unpack_entry(body, 1)[0]
    if kind == DELIVER_BLOCK:
        block_no, cut, n = _BLOCK_HDR.unpack_from(body, 1)
        pos = 1 + _BLOCK_HDR.size
        entries = []
        for _ in range(n):
            e, pos = _unpack_entry(body, pos)
            entries.append(e)
        return kind, Block(block_no, tuple(entries), _CUT_NAMES[cut])
    return kind, struct.unpack_from("<Q", body, 1)[0]


@dataclass(frozen=True, slots=True)
class AppendRequest:
    term: int
    leader_id: int
    prev_index: int
    prev_term: int
    commit_index: int
    entries: tuple[tuple[int, bytes], ...]  # (term, payload)


def pack_append(req: AppendRequest) -> bytes:
    parts = [_APPEND_HDR.pack(req.term, req.leader_id, req.prev_index, req.prev_term,
                              req.commit_index, len(req.entries))]
    for term, payload in req.entries:
        parts.append(_LOG_ENTRY_HDR.pack(term, len(payload)))
        parts.append(payload)
    return b"".join(parts)


def unpack_append(body: bytes) -> AppendRequest:
    term, leader, prev_i, prev_t, commit, n = _APPEND_HDR.unpack_from(body, 0)
    pos = _APPEND_HDR.size
    entries = []
    for _ in range(n):
        t, ln = _LOG_ENTRY_HDR.unpack_from(body, pos)
        pos += _LOG_ENTRY_HDR.size
        entries.append((t, bytes(body[pos:pos + ln])))
        pos += ln
    return AppendRequest(term, leader, prev_i, prev_t, commit, tuple(entries))


def pack_append_ack(term: int, node_id: int, success: bool, match_index: int) -> bytes:
    return _APPEND_ACK.pack(term, node_id, 1 if success else 0, match_index)


def unpack_append_ack(body: bytes) -> tuple[int, int, bool, int]:
    term, node, ok, match = _APPEND_ACK.unpack(body)
    return term, node, bool(ok), match


def pack_vote_req(term: int, candidate: int, last_index: int, last_term: int) -> bytes:
    return _VOTE_REQ.pack(term, candidate, last_index, last_term)


def unpack_vote_req(body: bytes) -> tuple[int, int, int, int]:
    return _VOTE_REQ.unpack(body)


def pack_vote_resp(term: int, voter: int, granted: bool) -> bytes:
    return _VOTE_RESP.pack(term, voter, 1 if granted else 0)


def unpack_vote_resp(body: bytes) -> tuple[int, int, bool]:
    term, voter, granted = _VOTE_RESP.unpack(body)
    return term, voter, bool(granted)
