"""A peer: state DB, ledger, validation pipeline and endorser, plus its socket endpoints."""
from __future__ import annotations

import logging
import socket
import struct
import threading
from pathlib import Path

from .chaincode import Proposal, Registry, default_registry
from .endorser import (
    REAL,
    Endorsement,
    EndorsementPolicy,
    EndorsementRefused,
    Endorser,
    Identity,
    Membership,
    verify_endorsement,
)
from .ledger import Transaction, deserialize_tx
from .ordering.client import deliver_stream
from .ordering.raft import bind_listener
from .ordering.wire import Block, Conn, ConnectionClosed, Msg, recv_raw_frame
from .persistence import BatcherConfig
from .statedb import StateDB
from .validator import BLOCK, CommitEvent, LedgerWriter, PeerHalted, PipelineConfig, Validator, Waiter

log = logging.getLogger(__name__)

LEDGER_FILE = "ledger.dat"
CHECKPOINT_FILE = "state.ckpt"


class Peer:
    def __init__(self, peer_id: str, data_dir: str | Path, identity: Identity, membership: Membership,
                 policies: dict[str, EndorsementPolicy], registry: Registry | None = None,
                 crypto: str = REAL, pipeline: PipelineConfig | None = None,
                 batcher: BatcherConfig | None = None, stripes: int = 64,
                 checkpoint_interval_s: float = 10.0) -> None:
        self.id = peer_id
        self.dir = Path(data_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.identity = identity
        self.membership = membership
        self.policies = dict(policies)
        self.crypto = crypto
        self.pipeline = pipeline or PipelineConfig()
        self.stripes = stripes
        self.halted: BaseException | None = None

        self.ledger = LedgerWriter(self.dir / LEDGER_FILE, batcher, on_error=self._on_persist_error)
        self.state, seen = self._recover()
        self.validator = Validator(self.state, self.ledger, self.verify, self.pipeline,
                                   seen_tx_ids=seen, on_halt=self._on_halt,
                                   checkpoint=self.checkpoint,
                                   checkpoint_interval_s=checkpoint_interval_s)
        self.endorser = Endorser(identity, self.state, registry or default_registry(), crypto,
                                 wait_height=self.validator.wait_height)
        self._stop = threading.Event()
        self._delivery: threading.Thread | None = None

    # -- recovery --------------------------------------------------------------

    def _recover(self) -> tuple[StateDB, set[bytes]]:
        records = self.ledger.load()
        ckpt = self.dir / CHECKPOINT_FILE
        state = None
        if ckpt.exists():
            state = StateDB.load_checkpoint(ckpt, self.stripes)
            if state.last_applied_seq > len(records):
                log.warning("%s: checkpoint is ahead of the ledger; rebuilding from the ledger", self.id)
                state = None
        if state is None:
            state = StateDB(self.stripes)
        seen: set[bytes] = set()
        base = state.last_applied_seq
        for rec in records:
            try:
                tx = deserialize_tx(rec.tx_bytes)
            except ValueError:
                tx = None
            if tx is not None:
                seen.add(tx.tx_id)
            if rec.seq <= base:
                continue
            if rec.valid and tx is not None and tx.rwset.writes:
                state.commit(tx.rwset.writes, rec.seq)
            else:
                state.mark_applied(rec.seq)
        if records:
            log.info("%s: recovered %d records (checkpoint at %d)", self.id, len(records), base)
        return state, seen

    def checkpoint(self) -> int:
        seq = self.state.write_checkpoint(self.dir / CHECKPOINT_FILE)
        self.ledger.sync()
        return seq

    # -- validity ----------------------------------------------------------------

    def verify(self, tx: Transaction) -> bool:
        policy = self.policies.get(tx.chaincode_id)
        return policy is not None and verify_endorsement(tx, policy, self.membership)

    # -- endorsement -------------------------------------------------------------

    def endorse(self, proposal: Proposal, min_seq: int = 0, timeout: float = 10.0) -> Endorsement:
        if self.halted is not None:
            raise PeerHalted(str(self.halted))
        return self.endorser.endorse(proposal, min_seq, timeout)

    def register_waiter(self, tx_id: bytes) -> Waiter:
        return self.validator.register_waiter(tx_id)

    @property
    def last_committed_seq(self) -> int:
        return self.validator.last_committed_seq

    # -- delivery ------------------------------------------------------------------

    def start(self, orderer_endpoints: list[tuple[str, int]]) -> "Peer":
        self._delivery = threading.Thread(target=self._deliver, args=(orderer_endpoints,),
                                          name=f"{self.id}:delivery", daemon=True)
        self._delivery.start()
        return self

    def _deliver(self, endpoints: list[tuple[str, int]]) -> None:
        blocks = self.pipeline.mode == BLOCK
        try:
            for item in deliver_stream(endpoints, self.validator.next_seq, blocks=blocks, stop=self._stop):
                if isinstance(item, Block):
                    self.validator.submit_block(item)
                else:
                    self.validator.submit(item)
        except PeerHalted:
            return
        except Exception as exc:
            if not self._stop.is_set():
                log.error("%s: delivery stopped: %s", self.id, exc)

    def _on_persist_error(self, exc: BaseException) -> None:
        self._on_halt(exc)

    def _on_halt(self, exc: BaseException) -> None:
        if self.halted is None:
            self.halted = exc
            log.critical("%s halted: %s", self.id, exc)
            self._stop.set()

    def stop(self) -> None:
        self._stop.set()
        if self._delivery is not None:
            self._delivery.join(timeout=5)
        self.validator.stop()
        self.ledger.close()

    def crash(self) -> None:
        """Simulate a process crash: buffered ledger bytes are lost."""
        self._stop.set()
        self.validator.stop()
        self.ledger.crash()


# -- wire encodings for the peer endpoints --------------------------------------

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_EVENT = struct.Struct("<IQB16sQQQ")
EVENT_BODY_LEN = _EVENT.size - 4  # 49

PROPOSE_OK, PROPOSE_REFUSED = 0, 1


def _blob(b: bytes) -> bytes:
    return _U32.pack(len(b)) + b


class _Cursor:
    def __init__(self, buf: bytes) -> None:
        self.buf, self.pos = buf, 0

    def blob(self) -> bytes:
        (n,) = _U32.unpack_from(self.buf, self.pos)
        self.pos += 4
        out = self.buf[self.pos:self.pos + n]
        if len(out) != n:
            raise ValueError("truncated message")
        self.pos += n
        return bytes(out)

    def text(self) -> str:
        return self.blob().decode()

    def u64(self) -> int:
        (v,) = _U64.unpack_from(self.buf, self.pos)
        self.pos += 8
        return v


def encode_proposal(p: Proposal, min_seq: int = 0) -> bytes:
    parts = [_blob(p.chaincode_id.encode()), _blob(p.function.encode()), _U32.pack(len(p.args))]
    parts += [_blob(a) for a in p.args]
    parts += [_blob(p.client_id.encode()), _U64.pack(min_seq)]
    return b"".join(parts)


def decode_proposal(body: bytes) -> tuple[Proposal, int]:
    c = _Cursor(body)
    cc, fn = c.text(), c.text()
    (n,) = _U32.unpack_from(body, c.pos)
    c.pos += 4
    args = tuple(c.blob() for _ in range(n))
    client = c.text()
    return Proposal(cc, fn, args, client), c.u64()


def encode_endorsement(e: Endorsement) -> bytes:
    return bytes([PROPOSE_OK]) + b"".join(
        _blob(x) for x in (e.endorser_id.encode(), e.rwset_bytes, e.signature, e.result))


def decode_endorsement(body: bytes) -> Endorsement:
    if body[0] != PROPOSE_OK:
        raise EndorsementRefused(body[1:].decode(errors="replace"))
    c = _Cursor(body)
    c.pos = 1
    return Endorsement(c.text(), c.blob(), c.blob(), c.blob())


def encode_event(ev: CommitEvent) -> bytes:
    return _EVENT.pack(EVENT_BODY_LEN, ev.seq, 1 if ev.valid else 0, ev.tx_id,
                       ev.received_ns, ev.verified_ns, ev.committed_ns)


def decode_event(body: bytes) -> CommitEvent:
    if len(body) != EVENT_BODY_LEN:
        raise ValueError(f"commit event frame must be {EVENT_BODY_LEN} bytes")
    _, seq, valid, tx_id, r, v, c = _EVENT.unpack(_U32.pack(EVENT_BODY_LEN) + body)
    return CommitEvent(seq, tx_id, bool(valid), r, v, c)


class PeerServer:
    """Serves PROPOSE, SUBSCRIBE and ADMIN for one peer."""

    def __init__(self, peer: Peer, addr: tuple[str, int] = ("127.0.0.1", 0),
                 listener: socket.socket | None = None) -> None:
        self.peer = peer
        self._listener = listener or bind_listener(addr)
        self.address = self._listener.getsockname()[:2]
        self._running = True
        self._conns: set[Conn] = set()
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=self._accept, name=f"{peer.id}:server", daemon=True)
        self._thread.start()

    def _accept(self) -> None:
        self._listener.settimeout(0.2)
        while self._running:
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn = Conn(sock)
            with self._lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: Conn) -> None:
        try:
            while self._running:
                kind, body = conn.recv()
                if kind == Msg.PROPOSE:
                    conn.send(Msg.PROPOSAL_RESP, self._propose(body))
                elif kind == Msg.SUBSCRIBE:
                    self._stream_events(conn)
                    return
                elif kind == Msg.ADMIN:
                    conn.send(Msg.ADMIN_RESP, self._admin(body))
                else:
                    return
        except (ConnectionClosed, OSError):
            pass
        finally:
            with self._lock:
                self._conns.discard(conn)
            conn.close()

    def _propose(self, body: bytes) -> bytes:
        try:
            proposal, min_seq = decode_proposal(body)
            return encode_endorsement(self.peer.endorse(proposal, min_seq))
        except (EndorsementRefused, PeerHalted, ValueError) as exc:
            return bytes([PROPOSE_REFUSED]) + str(exc).encode()

    def _admin(self, body: bytes) -> bytes:
        cmd = body.decode()
        if cmd == "last":
            return _U64.pack(self.peer.last_committed_seq)
        if cmd == "checkpoint":
            return _U64.pack(self.peer.checkpoint())
        if cmd == "digest":
            return self.peer.state.digest().encode()
        return b""

    def _stream_events(self, conn: Conn) -> None:
        sub = self.peer.validator.subscribe()
        try:
            while self._running:
                ev = sub.queue.get()
                if ev is None:
                    return
                conn.send_bytes(encode_event(ev))
        finally:
            self.peer.validator.unsubscribe(sub)

    def close(self) -> None:
        self._running = False
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            c.close()


class PeerClient:
    """Socket-side counterpart of :class:`PeerServer` for one client thread."""

    def __init__(self, addr: tuple[str, int], timeout: float = 10.0) -> None:
        self.addr = tuple(addr)
        self.timeout = timeout
        self._conn: Conn | None = None

    def _call(self, kind: int, body: bytes, expect: int) -> bytes:
        if self._conn is None:
            self._conn = Conn.connect(self.addr)
            self._conn.sock.settimeout(self.timeout)
        try:
            self._conn.send(kind, body)
            rkind, resp = self._conn.recv()
        except ConnectionClosed:
            self.close()
            raise
        if rkind != expect:
            self.close()
            raise ConnectionClosed(f"unexpected reply type {rkind}")
        return resp

    def endorse(self, proposal: Proposal, min_seq: int = 0) -> Endorsement:
        return decode_endorsement(self._call(Msg.PROPOSE, encode_proposal(proposal, min_seq),
                                             Msg.PROPOSAL_RESP))

    def admin(self, cmd: str) -> bytes:
        return self._call(Msg.ADMIN, cmd.encode(), Msg.ADMIN_RESP)

    def last_committed_seq(self) -> int:
        return _U64.unpack(self.admin("last"))[0]

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None


class CommitListener:
    """Subscribes to a peer's commit events and resolves waiters by tx_id."""

    def __init__(self, addr: tuple[str, int]) -> None:
        self._conn = Conn.connect(tuple(addr))
        self._conn.send(Msg.SUBSCRIBE)
        self._waiters: dict[bytes, Waiter] = {}
        self._lock = threading.Lock()
        self.events = 0
        self._thread = threading.Thread(target=self._run, name="commit-listener", daemon=True)
        self._thread.start()

    def register_waiter(self, tx_id: bytes) -> Waiter:
        w = Waiter()
        with self._lock:
            self._waiters[tx_id] = w
        return w

    def _run(self) -> None:
        try:
            while True:
                ev = decode_event(recv_raw_frame(self._conn.sock))
                self.events += 1
                with self._lock:
                    w = self._waiters.pop(ev.tx_id, None)
                if w is not None:
                    w.resolve(ev)
        except (ConnectionClosed, OSError, ValueError):
            with self._lock:
                waiters = list(self._waiters.values())
                self._waiters.clear()
            for w in waiters:
                w.resolve(ConnectionClosed("commit subscription closed"))

    def close(self) -> None:
        self._conn.close()
