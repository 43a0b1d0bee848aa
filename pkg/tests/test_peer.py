"""Peer process: wire codecs, end-to-end commits, crash recovery, checkpoints."""
from __future__ import annotations

import pytest

from streamledger.bench import SOCKET, Session, Target
from streamledger.bench.report import OK
from streamledger.chaincode import Proposal
from streamledger.endorser import Endorsement, EndorsementRefused
from streamledger.network import Network, NetworkConfig
from streamledger.peer import (
    CHECKPOINT_FILE,
    EVENT_BODY_LEN,
    decode_endorsement,
    decode_event,
    decode_proposal,
    encode_endorsement,
    encode_event,
    encode_proposal,
)
from streamledger.replay import read_ledger, replay_file
from streamledger.validator import CommitEvent

QUICK = NetworkConfig(peers=2, orderers=1, clients=2, flush_timeout_ms=10, fsync=False,
                      checkpoint_interval_s=3600)


def test_proposal_codec():
    p = Proposal("scm", "place_order", (b"o1", b"", b"\x00\xff"), "client3")
    assert decode_proposal(encode_proposal(p, 42)) == (p, 42)


def test_endorsement_codec():
    e = Endorsement("peer1", b"rwset", b"s" * 64, b"result")
    assert decode_endorsement(encode_endorsement(e)) == e
    with pytest.raises(EndorsementRefused, match="no such order"):
        decode_endorsement(b"\x01no such order")


def test_commit_event_frame():
    ev = CommitEvent(7, bytes(range(16)), True, 1, 2, 3)
    raw = encode_event(ev)
    assert len(raw) == 4 + 49 and EVENT_BODY_LEN == 49
    assert raw[:4] == (49).to_bytes(4, "little")
    assert raw[4:12] == (7).to_bytes(8, "little") and raw[12] == 1 and raw[13:29] == bytes(range(16))
    assert decode_event(raw[4:]) == ev
    with pytest.raises(ValueError):
        decode_event(raw[4:-1])


def _insert(session: Session, i: int, key: str, value: bytes = b"v"):
    return session.execute(i, "insert", Proposal("kv", "insert", (key.encode(), value), ""))


def _all_caught_up(net: Network, timeout: float = 20.0) -> int:
    last = max(o.commit_index for o in net.orderers if o.running)
    assert net.wait_committed(last, timeout)
    return last


@pytest.fixture
def net(tmp_path):
    n = Network(QUICK, tmp_path / "net").start()
    yield n
    n.stop()


def test_commits_reach_every_peer(net):
    s = Session(Target.from_network(net), 0, None)
    try:
        recs = [_insert(s, i, f"k{i}") for i in range(20)]
    finally:
        s.close()
    assert all(r.status == OK and r.valid for r in recs)
    assert [r.seq for r in recs] == list(range(1, 21))
    _all_caught_up(net)
    a, b = (p.state.digest() for p in net.peers)
    assert a == b
    for p in net.peers:
        p.ledger.sync()
    ledgers = [path.read_bytes() for path in net.peer_ledger_paths]
    assert ledgers[0] == ledgers[1]
    result = replay_file(net.peer_ledger_paths[0])
    assert result.ok and result.digest == a


def test_socket_path(net):
    t = Target.from_network(net, SOCKET)
    from streamledger.peer import CommitListener

    listener = CommitListener(t.peer_addrs[0])
    s = Session(t, 1, listener)
    try:
        first = _insert(s, 0, "a")
        again = _insert(s, 1, "a")  # insert is an upsert: the existence read pins version 1
        upd = s.execute(2, "update", Proposal("kv", "update", (b"a", b"w"), ""))
    finally:
        s.close()
        listener.close()
    assert first.status == OK and first.valid
    assert again.status == OK and again.valid and again.seq == first.seq + 1
    assert upd.status == OK and upd.valid
    assert first.submit_ns <= first.endorsed_ns <= first.ordered_ns <= first.committed_ns


def test_crash_restart_catches_up(net):
    s = Session(Target.from_network(net), 0, None)
    try:
        for i in range(30):
            _insert(s, i, f"k{i}")
        net.restart_peer(1, crash=True)
        for i in range(30, 40):
            _insert(s, i, f"k{i}")
    finally:
        s.close()
    last = _all_caught_up(net)
    assert last == 40
    assert net.peers[0].state.digest() == net.peers[1].state.digest()
    assert net.peers[1].last_committed_seq == 40


def test_checkpoint_plus_ledger_suffix(net):
    s = Session(Target.from_network(net), 0, None)
    try:
        for i in range(15):
            _insert(s, i, f"k{i}")
        _all_caught_up(net)
        assert net.peers[1].checkpoint() == 15
        for i in range(15, 25):
            s.execute(i, "update", Proposal("kv", "update", (f"k{i - 15}".encode(), b"new"), ""))
        _all_caught_up(net)
    finally:
        s.close()
    before = net.peers[1].state.digest()
    peer = net.restart_peer(1, crash=False)
    assert peer.state.digest() == before
    assert peer.state.last_applied_seq == 25 and len(peer.validator.seen_tx_ids) == 25


def test_checkpoint_ahead_of_ledger_is_ignored(net):
    s = Session(Target.from_network(net), 0, None)
    try:
        for i in range(10):
            _insert(s, i, f"k{i}")
    finally:
        s.close()
    _all_caught_up(net)
    peer = net.peers[1]
    peer.checkpoint()
    net.stop()
    path = peer.dir / "ledger.dat"
    recs = read_ledger(path)
    keep = sum(45 + len(r.tx_bytes) for r in recs[:4])
    path.write_bytes(path.read_bytes()[:keep])
    assert (peer.dir / CHECKPOINT_FILE).exists()

    from streamledger.peer import Peer

    again = Peer(peer.id, peer.dir, peer.identity, peer.membership, peer.policies,
                 pipeline=QUICK.pipeline(), batcher=QUICK.batcher())
    try:
        assert again.state.last_applied_seq == 4 and len(again.state) == 4
    finally:
        again.stop()
