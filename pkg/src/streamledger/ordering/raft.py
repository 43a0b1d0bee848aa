"""Single-leader replicated log with majority acknowledgment and term-based elections.

Each :class:`OrderingNode` listens on one TCP address and serves three kinds
of traffic over the same framing:

* clients ``SUBMIT`` payloads and get ``SUBMIT_ACK(seq)`` once the entry is
  committed (replicated on a majority);
* subscribers ``FETCH`` single entries, the last entry, or an open-ended
  stream of committed entries (or blocks in the batching baseline);
* nodes exchange ``APPEND``/``APPEND_ACK`` and ``VOTE_REQ``/``VOTE_RESP``.

A one-node cluster is the solo orderer. Sequence numbers are log indices of
committed entries, so they are gapless and never reassigned.
"""
from __future__ import annotations

import logging
import random
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..persistence import BatcherConfig
from . import wire
from .blocks import BlockCutter
from .log import RaftLog, payload_hash
from .wire import AppendRequest, Block, Conn, ConnectionClosed, Msg, OrderedEntry

log = logging.getLogger(__name__)

FOLLOWER, CANDIDATE, LEADER = "follower", "candidate", "leader"
STREAM, BLOCK = "stream", "block"


class NotFound(LookupError):
    pass


@dataclass(frozen=True)
class OrdererConfig:
    mode: str = STREAM
    block_size: int = 10
    block_timeout_ms: float = 2000.0
    election_timeout_ms: tuple[float, float] = (400.0, 800.0)
    heartbeat_ms: float = 50.0
    rpc_timeout_ms: float = 500.0
    max_append_entries: int = 256
    fsync_per_entry: bool = False
    batcher: BatcherConfig = field(default_factory=BatcherConfig)

    def __post_init__(self) -> None:
        if self.mode not in (STREAM, BLOCK):
            raise ValueError(f"unknown ordering mode {self.mode!r}")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")


def bind_listener(addr: tuple[str, int]) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind(addr)
    sock.listen(128)
    return sock


class OrderingNode:
    def __init__(self, node_id: int, addrs: list[tuple[str, int]], data_dir: str | Path,
                 config: OrdererConfig | None = None, listener: socket.socket | None = None) -> None:
        self.id = node_id
        self.addrs = list(addrs)
        self.n = len(addrs)
        self.majority = self.n // 2 + 1
        self.config = config or OrdererConfig()
        self.data_dir = Path(data_dir)
        self._listener = listener or bind_listener(self.addrs[node_id])
        self.address = self._listener.getsockname()[:2]

        self._lock = threading.RLock()
        self._commit_cond = threading.Condition(self._lock)
        self._repl_cond = threading.Condition(self._lock)
        self._blocks_cond = threading.Condition(threading.Lock())

        self.log = RaftLog(self.data_dir, self.config.batcher)
        self.role = FOLLOWER
        self.leader_id: int | None = None
        self.commit_index = 0
        self._durable_index = self.log.last_index
        self._next: dict[int, int] = {}
        self._match: dict[int, int] = {}
        self._waiters: dict[int, list[Conn]] = {}
        self._leader_epoch = 0
        self._last_contact = time.monotonic()
        self._election_deadline = self._new_deadline()

        self.blocks: list[Block] = []
        self._cutter: BlockCutter | None = None
        if self.config.mode == BLOCK:
            self._cutter = BlockCutter(self.config.block_size, self.config.block_timeout_ms / 1000.0,
                                       self._on_block, self.data_dir / "blocks.dat",
                                       self.config.batcher)

        self._running = False
        self._conns: set[Conn] = set()
        self._conns_lock = threading.Lock()
        self._threads: list[threading.Thread] = []

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> "OrderingNode":
        self._running = True
        self._spawn(self._accept_loop, "accept")
        self._spawn(self._ticker, "ticker")
        if self.n == 1:
            self._start_election()
        return self

    def _spawn(self, target, name: str, *args) -> threading.Thread:
        t = threading.Thread(target=target, args=args, name=f"orderer{self.id}:{name}", daemon=True)
        t.start()
        self._threads.append(t)
        return t

    def _shutdown_io(self) -> None:
        self._running = False
        with self._lock:
            self._leader_epoch += 1
            self._commit_cond.notify_all()
            self._repl_cond.notify_all()
        with self._blocks_cond:
            self._blocks_cond.notify_all()
        try:
            self._listener.shutdown(socket.SHUT_RDWR)  # wakes the accept loop and frees the port
        except OSError:
            pass
        self._listener.close()
        for t in self._threads:
            if t.name.endswith(":accept") and t is not threading.current_thread():
                t.join(timeout=1.0)
        with self._conns_lock:
            conns = list(self._conns)
            self._conns.clear()
        for c in conns:
            c.close()

    def kill(self) -> None:
        """Crash the node: drop connections and lose any unflushed log tail."""
        self._shutdown_io()
        if self._cutter is not None:
            self._cutter.crash()
        self.log.crash()

    def stop(self) -> None:
        self._shutdown_io()
        if self._cutter is not None:
            self._cutter.close()
        self.log.close()

    @property
    def running(self) -> bool:
        return self._running

    def _track(self, conn: Conn) -> Conn:
        with self._conns_lock:
            if not self._running:
                conn.close()
                raise ConnectionClosed("node stopped")
            self._conns.add(conn)
        return conn

    def _untrack(self, conn: Conn) -> None:
        with self._conns_lock:
            self._conns.discard(conn)
        conn.close()

    # -- in-process ordering interface -----------------------------------------------

    def get(self, seq: int) -> OrderedEntry:
        with self._lock:
            if not 1 <= seq <= self.commit_index:
                raise NotFound(seq)
            e = self.log.entry(seq)
        return OrderedEntry(seq, e.payload, e.payload_hash)

    def get_last(self) -> tuple[int, OrderedEntry] | None:
        with self._lock:
            if self.commit_index == 0:
                return None
            seq = self.commit_index
        return seq, self.get(seq)

    def status(self) -> dict:
        with self._lock:
            return {"id": self.id, "role": self.role, "term": self.log.current_term,
                    "leader": self.leader_id, "commit_index": self.commit_index,
                    "last_index": self.log.last_index}

    # -- networking --------------------------------------------------------------

    def _accept_loop(self) -> None:
        self._listener.settimeout(0.2)
        while self._running:
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                conn = self._track(Conn(sock))
            except ConnectionClosed:
                return
            self._spawn(self._serve, "conn", conn)

    def _serve(self, conn: Conn) -> None:
        try:
            while self._running:
                kind, body = conn.recv()
                if kind == Msg.SUBMIT:
                    self._on_submit(conn, body)
                elif kind == Msg.APPEND:
                    conn.send(Msg.APPEND_ACK, self._on_append(wire.unpack_append(body)))
                elif kind == Msg.VOTE_REQ:
                    conn.send(Msg.VOTE_RESP, self._on_vote_req(*wire.unpack_vote_req(body)))
                elif kind == Msg.FETCH:
                    seq, fkind = wire.unpack_fetch(body)
                    if fkind == wire.FETCH_STREAM:
                        self._stream_entries(conn, seq)
                        return
                    if fkind == wire.FETCH_BLOCKS:
                        self._stream_blocks(conn, seq)
                        return
                    self._answer_fetch(conn, seq, fkind)
                else:
                    log.warning("orderer%d: unexpected message type %d", self.id, kind)
                    return
        except (ConnectionClosed, OSError):
            pass
        finally:
            self._untrack(conn)

    def _answer_fetch(self, conn: Conn, seq: int, fkind: int) -> None:
        if fkind == wire.FETCH_LAST:
            last = self.get_last()
            body = (wire.pack_deliver_entry(last[1]) if last
                    else wire.pack_deliver_status(wire.DELIVER_NOT_FOUND))
        else:
            try:
                body = wire.pack_deliver_entry(self.get(seq))
            except NotFound:
                body = wire.pack_deliver_status(wire.DELIVER_NOT_FOUND, seq)
        conn.send(Msg.DELIVER, body)

    def _stream_entries(self, conn: Conn, next_seq: int) -> None:
        next_seq = max(1, next_seq)
        while self._running:
            with self._commit_cond:
                while self._running and self.commit_index < next_seq:
                    self._commit_cond.wait(0.5)
                if not self._running:
                    return
                hi = min(self.commit_index, next_seq + 255)
                batch = [(i, self.log.entry(i)) for i in range(next_seq, hi + 1)]
            frames = b"".join(
                wire.encode_frame(Msg.DELIVER, wire.pack_deliver_entry(OrderedEntry(i, e.payload, e.payload_hash)))
                for i, e in batch)
            conn.send_bytes(frames)
            next_seq = hi + 1

    def _stream_blocks(self, conn: Conn, from_seq: int) -> None:
        pos = 0
        while self._running:
            with self._blocks_cond:
                while self._running and pos >= len(self.blocks):
                    self._blocks_cond.wait(0.5)
                if not self._running:
                    return
                batch = self.blocks[pos:]
            pos += len(batch)
            out = [wire.encode_frame(Msg.DELIVER, wire.pack_deliver_block(b))
                   for b in batch if b.entries[-1].seq >= from_seq]
            if out:
                conn.send_bytes(b"".join(out))

    def _on_block(self, block: Block) -> None:
        with self._blocks_cond:
            self.blocks.append(block)
            self._blocks_cond.notify_all()

    # -- client submissions --------------------------------------------------------

    def _on_submit(self, conn: Conn, payload: bytes) -> None:
        if not payload:
            conn.send(Msg.SUBMIT_ACK, wire.pack_submit_ack(0, wire.ACK_REJECTED, -1))
            return
        with self._lock:
            if self.role != LEADER:
                hint = -1 if self.leader_id is None else self.leader_id
                reply = wire.pack_submit_ack(0, wire.ACK_NOT_LEADER, hint)
                index = None
            else:
                # A client re-sending after a timeout or leader change is answered with the
                # first copy's seq, so every acknowledged seq holds the copy that validates.
                first = self.log.find(payload_hash(payload))
                if first is not None and first <= self.commit_index:
                    reply, index = wire.pack_submit_ack(first, wire.ACK_OK, -1), None
                elif first is not None and self.log.term_at(first) == self.log.current_term:
                    self._waiters.setdefault(first, []).append(conn)
                    return
                else:
                    # An uncommitted copy from an older term only commits behind a
                    # current-term entry, so the payload is appended again either way.
                    index = self.log.append(self.log.current_term, payload)
                    self._waiters.setdefault(first or index, []).append(conn)
                    reply = None
        if reply is not None:
            conn.send(Msg.SUBMIT_ACK, reply)
            return
        if self.config.fsync_per_entry:
            self.log.sync()
        with self._lock:
            self._durable_index = max(self._durable_index, index)
            self._repl_cond.notify_all()
            self._maybe_advance_commit()

    # -- replication (leader side) -------------------------------------------------

    def _maybe_advance_commit(self) -> None:
        if self.role != LEADER:
            return
        matches = sorted([self._durable_index] + [self._match.get(p, 0) for p in self._peers()],
                         reverse=True)
        n = matches[self.majority - 1]
        if n > self.commit_index and self.log.term_at(n) == self.log.current_term:
            self._set_commit(n)

    def _peers(self) -> list[int]:
        return [i for i in range(self.n) if i != self.id]

    def _set_commit(self, n: int) -> None:
        old = self.commit_index
        self.commit_index = n
        self._commit_cond.notify_all()
        self._repl_cond.notify_all()
        acks = []
        for seq in range(old + 1, n + 1):
            for conn in self._waiters.pop(seq, ()):
                acks.append((conn, seq))
            if self._cutter is not None:
                e = self.log.entry(seq)
                self._cutter.add(OrderedEntry(seq, e.payload, e.payload_hash))
        if acks:
            threading.Thread(target=self._send_acks, args=(acks,), daemon=True).start() \
                if len(acks) > 64 else self._send_acks(acks)

    @staticmethod
    def _send_acks(acks: list[tuple[Conn, int]]) -> None:
        for conn, seq in acks:
            try:
                conn.send(Msg.SUBMIT_ACK, wire.pack_submit_ack(seq, wire.ACK_OK, -1))
            except ConnectionClosed:
                pass

    def _replicate_to(self, peer: int, epoch: int) -> None:
        cfg = self.config
        conn: Conn | None = None
        sent_commit = -1
        last_send = 0.0
        try:
            while True:
                with self._repl_cond:
                    while True:
                        if not self._running or self._leader_epoch != epoch:
                            return
                        nxt = self._next[peer]
                        pending = nxt <= self.log.last_index
                        hb_due = time.monotonic() - last_send >= cfg.heartbeat_ms / 1000.0
                        if pending or hb_due or sent_commit != self.commit_index:
                            break
                        self._repl_cond.wait(cfg.heartbeat_ms / 1000.0)
                    prev = nxt - 1
                    hi = min(self.log.last_index, prev + cfg.max_append_entries)
                    entries = tuple((self.log.entry(i).term, self.log.entry(i).payload)
                                    for i in range(nxt, hi + 1))
                    req = AppendRequest(self.log.current_term, self.id, prev, self.log.term_at(prev),
                                        self.commit_index, entries)
                    term = self.log.current_term
                last_send = time.monotonic()
                try:
                    if conn is None:
                        conn = self._track(Conn.connect(self.addrs[peer], timeout=cfg.rpc_timeout_ms / 1000.0))
                        conn.sock.settimeout(cfg.rpc_timeout_ms / 1000.0)
                    conn.send(Msg.APPEND, wire.pack_append(req))
                    kind, body = conn.recv()
                except (ConnectionClosed, OSError):
                    if conn is not None:
                        self._untrack(conn)
                        conn = None
                    time.sleep(cfg.heartbeat_ms / 1000.0)
                    continue
                if kind != Msg.APPEND_ACK:
                    continue
                r_term, _, ok, match = wire.unpack_append_ack(body)
                with self._lock:
                    if r_term > self.log.current_term:
                        self._step_down(r_term)
                        return
                    if self._leader_epoch != epoch or term != self.log.current_term:
                        return
                    sent_commit = req.commit_index
                    if ok:
                        self._match[peer] = max(self._match.get(peer, 0), match)
                        self._next[peer] = self._match[peer] + 1
                        self._maybe_advance_commit()
                    else:
                        self._next[peer] = max(1, min(self._next[peer] - 1, match + 1))
        finally:
            if conn is not None:
                self._untrack(conn)

    # -- follower side --------------------------------------------------------------

    def _on_append(self, req: AppendRequest) -> bytes:
        with self._lock:
            lg = self.log
            if req.term < lg.current_term:
                return wire.pack_append_ack(lg.current_term, self.id, False, lg.last_index)
            if req.term > lg.current_term or self.role != FOLLOWER:
                self._become_follower(req.term)
            self.leader_id = req.leader_id
            self._touch()
            if req.prev_index > lg.last_index or lg.term_at(req.prev_index) != req.prev_term:
                hint = min(lg.last_index, req.prev_index - 1)
                return wire.pack_append_ack(lg.current_term, self.id, False, hint)
            idx = req.prev_index
            appended = False
            for term, payload in req.entries:
                idx += 1
                if idx <= lg.last_index:
                    if lg.term_at(idx) == term:
                        continue
                    assert idx > self.commit_index, "attempt to overwrite a committed entry"
                    lg.truncate_from(idx)
                    self._durable_index = min(self._durable_index, idx - 1)
                lg.append(term, payload)
                appended = True
            match = req.prev_index + len(req.entries)
            if appended and self.config.fsync_per_entry:
                lg.sync()
            self._durable_index = lg.last_index
            new_commit = min(req.commit_index, match)
            if new_commit > self.commit_index:
                self._set_commit(new_commit)
            return wire.pack_append_ack(lg.current_term, self.id, True, match)

    def _on_vote_req(self, term: int, candidate: int, last_index: int, last_term: int) -> bytes:
        with self._lock:
            lg = self.log
            if term > lg.current_term:
                self._become_follower(term)
            up_to_date = (last_term, last_index) >= (lg.last_term, lg.last_index)
            grant = (term == lg.current_term and lg.voted_for in (None, candidate) and up_to_date)
            if grant and lg.voted_for != candidate:
                lg.save_meta(lg.current_term, candidate)
            if grant:
                self._touch()
            return wire.pack_vote_resp(lg.current_term, self.id, grant)

    # -- roles ---------------------------------------------------------------------

    def _new_deadline(self) -> float:
        lo, hi = self.config.election_timeout_ms
        return time.monotonic() + random.uniform(lo, hi) / 1000.0

    def _touch(self) -> None:
        self._last_contact = time.monotonic()
        self._election_deadline = self._new_deadline()

    def _become_follower(self, term: int) -> None:
        if term > self.log.current_term:
            self.log.save_meta(term, None)
        if self.role == LEADER:
            self._fail_waiters()
        if self.role != FOLLOWER:
            log.info("orderer%d: follower in term %d", self.id, term)
        self.role = FOLLOWER
        self._leader_epoch += 1
        self._repl_cond.notify_all()

    def _step_down(self, term: int) -> None:
        self._become_follower(term)
        self.leader_id = None
        self._touch()

    def _fail_waiters(self) -> None:
        waiters = [c for conns in self._waiters.values() for c in conns]
        self._waiters.clear()
        hint = -1 if self.leader_id in (None, self.id) else self.leader_id
        for conn in waiters:
            try:
                conn.send(Msg.SUBMIT_ACK, wire.pack_submit_ack(0, wire.ACK_NOT_LEADER, hint))
            except ConnectionClosed:
                pass

    def _ticker(self) -> None:
        while self._running:
            time.sleep(0.01)
            with self._lock:
                due = self.role != LEADER and time.monotonic() >= self._election_deadline
            if due and self._running:
                self._start_election()

    def _start_election(self) -> None:
        with self._lock:
            lg = self.log
            term = lg.current_term + 1
            lg.save_meta(term, self.id)
            self.role = CANDIDATE
            self.leader_id = None
            self._leader_epoch += 1
            self._election_deadline = self._new_deadline()
            votes = {self.id}
            last_index, last_term = lg.last_index, lg.last_term
            log.info("orderer%d: election for term %d", self.id, term)
            if len(votes) >= self.majority:
                self._become_leader()
                return
        body = wire.pack_vote_req(term, self.id, last_index, last_term)
        for peer in self._peers():
            self._spawn(self._request_vote, f"vote{peer}", peer, term, body, votes)

    def _request_vote(self, peer: int, term: int, body: bytes, votes: set[int]) -> None:
        timeout = self.config.rpc_timeout_ms / 1000.0
        try:
            conn = self._track(Conn.connect(self.addrs[peer], timeout=timeout))
        except (OSError, ConnectionClosed):
            return
        try:
            conn.sock.settimeout(timeout)
            conn.send(Msg.VOTE_REQ, body)
            kind, resp = conn.recv()
        except (ConnectionClosed, OSError):
            return
        finally:
            self._untrack(conn)
        if kind != Msg.VOTE_RESP:
            return
        r_term, voter, granted = wire.unpack_vote_resp(resp)
        with self._lock:
            if r_term > self.log.current_term:
                self._step_down(r_term)
                return
            if self.role != CANDIDATE or self.log.current_term != term or not granted:
                return
            votes.add(voter)
            if len(votes) >= self.majority:
                self._become_leader()

    def _become_leader(self) -> None:
        self.role = LEADER
        self.leader_id = self.id
        self._leader_epoch += 1
        epoch = self._leader_epoch
        for p in self._peers():
            self._next[p] = self.log.last_index + 1
            self._match[p] = 0
        self._durable_index = self.log.last_index
        log.info("orderer%d: leader for term %d (last index %d)", self.id, self.log.current_term,
                 self.log.last_index)
        for p in self._peers():
            self._spawn(self._replicate_to, f"repl{p}", p, epoch)
        self._maybe_advance_commit()


SoloOrderer = OrderingNode  # a one-address cluster


def start_cluster(n: int, data_root: str | Path, config: OrdererConfig | None = None,
                  host: str = "127.0.0.1") -> list[OrderingNode]:
    """Bind ``n`` listeners on ephemeral ports and start a node on each."""
    listeners = [bind_listener((host, 0)) for _ in range(n)]
    addrs = [s.getsockname()[:2] for s in listeners]
    nodes = [OrderingNode(i, addrs, Path(data_root) / f"orderer{i}", config, listeners[i])
             for i in range(n)]
    for node in nodes:
        node.start()
    return nodes


def wait_for_leader(nodes: list[OrderingNode], timeout: float = 10.0) -> OrderingNode:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        leaders = [n for n in nodes if n.running and n.role == LEADER]
        if len(leaders) == 1:
            return leaders[0]
        time.sleep(0.02)
    raise TimeoutError("no leader elected")
