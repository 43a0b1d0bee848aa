"""Closed-loop benchmark driver: one thread per client, each with one op in flight."""
from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from ..chaincode import Proposal
from ..endorser import (
    AssemblyError,
    EndorsementDivergence,
    EndorsementPolicy,
    EndorsementRefused,
    Identity,
    assemble_tx,
)
from ..ledger import serialize_tx
from ..network import Network, NetworkConfig, read_client_keys, read_endpoints
from ..ordering.client import OrdererClient, OrderingRejected, OrderingTimeout
from ..ordering.wire import ConnectionClosed
from ..peer import CommitListener, PeerClient
from ..validator import PeerHalted
from .report import ERROR, OK, REFUSED, TIMEOUT, OpRecord, RunReport
from .workload import Operation, WorkloadSpec, generate

log = logging.getLogger(__name__)

INPROC, SOCKET = "inproc", "socket"
MAX_DIVERGENCE_RETRIES = 5


@dataclass
class Target:
    """Where and how clients reach the network."""

    orderers: list[tuple[str, int]]
    peer_ids: list[str]
    policies: dict[str, EndorsementPolicy]
    clients: list[Identity]
    crypto: str
    path: str = INPROC
    network: Network | None = None
    peer_addrs: list[tuple[str, int]] | None = None
    validating_peer: int = 0
    base_seq: int = 0  # sessions start with endorsers caught up to here

    @classmethod
    def from_network(cls, net: Network, path: str = INPROC) -> "Target":
        addrs = [s.address for s in net.servers] or None
        if path == SOCKET and addrs is None:
            raise ValueError("socket path needs peers started with serve_peers=on")
        return cls(net.orderer_addrs, [p.id for p in net.peers], net.policies, net.client_identities,
                   net.config.crypto, path, net, addrs)

    @classmethod
    def from_data_dir(cls, data_dir: str | Path) -> "Target":
        """Connect to a network started elsewhere (``net start``), over sockets."""
        cfg = NetworkConfig.from_file(Path(data_dir) / "network.conf")
        orderers, peers = read_endpoints(data_dir)
        return cls(orderers, cfg.peer_ids, cfg.policies(), read_client_keys(data_dir), cfg.crypto,
                   SOCKET, None, peers)


class Session:
    """One client's connections; not shared between threads."""

    def __init__(self, target: Target, client: int, listener: CommitListener | None) -> None:
        if client >= len(target.clients):
            raise ValueError(f"network has {len(target.clients)} client identities, need client{client}")
        self.t = target
        self.identity = target.clients[client]
        self.client = client
        self.orderer = OrdererClient(target.orderers)
        self._listener = listener
        self._peer_clients: dict[int, PeerClient] = {}
        self.last_seq = target.base_seq

    def _endorse(self, peer_id: str, proposal: Proposal):
        idx = self.t.peer_ids.index(peer_id)
        if self.t.path == INPROC:
            return self.t.network.peers[idx].endorse(proposal, self.last_seq)
        pc = self._peer_clients.get(idx)
        if pc is None:
            pc = self._peer_clients[idx] = PeerClient(self.t.peer_addrs[idx])
        return pc.endorse(proposal, self.last_seq)

    def _register(self, tx_id: bytes):
        if self.t.path == INPROC:
            return self.t.network.peers[self.t.validating_peer].register_waiter(tx_id)
        return self._listener.register_waiter(tx_id)

    def endorsers_for(self, chaincode_id: str) -> list[str]:
        policy = self.t.policies[chaincode_id]
        n = policy.n
        return [policy.endorsers[(self.client + j) % n] for j in range(policy.k)]

    def execute(self, op_index: int, op_type: str, proposal: Proposal, timeout: float = 10.0) -> OpRecord:
        proposal = Proposal(proposal.chaincode_id, proposal.function, proposal.args, self.identity.id)
        rec = OpRecord(op_index, op_type, self.client, time.time_ns())
        deadline = time.monotonic() + timeout
        try:
            for attempt in range(MAX_DIVERGENCE_RETRIES):
                ends = [self._endorse(p, proposal) for p in self.endorsers_for(proposal.chaincode_id)]
                try:
                    tx = assemble_tx(proposal, ends, self.t.policies[proposal.chaincode_id],
                                     self.identity, self.t.crypto)
                    break
                except EndorsementDivergence:
                    if attempt == MAX_DIVERGENCE_RETRIES - 1:
                        raise
                    time.sleep(0.001)
            rec.endorsed_ns = time.time_ns()
            payload = serialize_tx(tx)
            waiter = self._register(tx.tx_id)
            self.orderer.timeout = max(0.1, deadline - time.monotonic())
            rec.seq = self.orderer.order(payload)
            rec.ordered_ns = time.time_ns()
            ev = waiter.wait(max(0.0, deadline - time.monotonic()))
            rec.committed_ns = time.time_ns()
            rec.valid = ev.valid
            rec.peer_received_ns, rec.peer_verified_ns, rec.peer_committed_ns = (
                ev.received_ns, ev.verified_ns, ev.committed_ns)
            self.last_seq = max(self.last_seq, ev.seq)
        except (EndorsementRefused, AssemblyError, OrderingRejected):
            rec.status = REFUSED
        except (OrderingTimeout, TimeoutError):
            rec.status = TIMEOUT
        except (ConnectionClosed, OSError, PeerHalted) as exc:
            log.warning("client%d op %d failed: %s", self.client, op_index, exc)
            rec.status = ERROR
        return rec

    def close(self) -> None:
        self.orderer.close()
        for pc in self._peer_clients.values():
            pc.close()


def _listener_for(target: Target) -> CommitListener | None:
    if target.path != SOCKET:
        return None
    return CommitListener(target.peer_addrs[target.validating_peer])


def bulk_load(target: Target, proposals: list[Proposal], timeout: float = 60.0) -> int:
    """Commit load proposals; returns how many committed valid.

    Loads are blind writes to disjoint keys, so every chunk is endorsed and
    ordered back to back and the commits are awaited together.
    """
    listener = _listener_for(target)
    s = Session(target, 0, listener)
    waiters = []
    try:
        for p in proposals:
            p = Proposal(p.chaincode_id, p.function, p.args, s.identity.id)
            ends = [s._endorse(e, p) for e in s.endorsers_for(p.chaincode_id)]
            tx = assemble_tx(p, ends, target.policies[p.chaincode_id], s.identity, target.crypto)
            waiters.append(s._register(tx.tx_id))
            s.orderer.order(serialize_tx(tx))
        deadline = time.monotonic() + timeout
        events = [w.wait(max(0.0, deadline - time.monotonic())) for w in waiters]
    finally:
        s.close()
        if listener is not None:
            listener.close()
    target.base_seq = max([target.base_seq] + [ev.seq for ev in events])
    return sum(1 for ev in events if ev.valid)


def run_closed_loop(spec: WorkloadSpec, target: Target, timeout: float = 10.0,
                    ops: list[Operation] | None = None, load: bool = True) -> RunReport:
    """Drive ``spec`` against ``target``; every issued op ends up in the report."""
    loads, generated = generate(spec)
    ops = generated if ops is None else ops
    if load:
        loaded = bulk_load(target, loads)
        if loaded != len(loads):
            raise RuntimeError(f"bulk load failed: {loaded}/{len(loads)} chunks committed")
    listener = _listener_for(target)
    per_client: dict[int, list[Operation]] = {c: [] for c in range(spec.clients)}
    for op in ops:
        per_client[op.client].append(op)
    results: queue.SimpleQueue[OpRecord] = queue.SimpleQueue()
    start = threading.Barrier(spec.clients + 1)

    def client_loop(c: int) -> None:
        s = Session(target, c, listener)
        try:
            start.wait()
            for op in per_client[c]:
                results.put(s.execute(op.index, op.op_type, op.proposal, timeout))
        finally:
            s.close()

    threads = [threading.Thread(target=client_loop, args=(c,), name=f"client{c}", daemon=True)
               for c in range(spec.clients)]
    for t in threads:
        t.start()
    start.wait()
    t0 = time.perf_counter()
    for t in threads:
        t.join()
    wall = time.perf_counter() - t0
    if listener is not None:
        listener.close()
    records = []
    while True:
        try:
            records.append(results.get_nowait())
        except queue.Empty:
            break
    meta = {"workload": spec.kind, "clients": spec.clients, "ops": spec.total_ops,
            "path": target.path, "wall_s": round(wall, 3)}
    return RunReport(records, meta=meta)
