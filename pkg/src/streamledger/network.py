"""Network configuration and single-host assembly of orderers and peers.

Everything runs on loopback with ephemeral ports unless ``base_port`` is set.
The data directory receives the bootstrap files a fresh process needs to join
or audit the network: ``network.conf``, ``identities.txt``, ``client_keys``
and ``endpoints.conf``.
"""
from __future__ import annotations

import dataclasses
import logging
import shutil
from dataclasses import dataclass, fields
from pathlib import Path

from .endorser import NULL, REAL, EndorsementPolicy, Identity, Membership, read_identities, write_identities
from .ordering.raft import BLOCK, STREAM, OrdererConfig, OrderingNode, bind_listener, wait_for_leader
from .peer import Peer, PeerServer
from .persistence import FSYNC_NEVER, FSYNC_PER_FLUSH, BatcherConfig
from .replay import parse_kv_file, parse_policy
from .validator import PipelineConfig

log = logging.getLogger(__name__)

_BOOL = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


@dataclass(frozen=True)
class NetworkConfig:
    peers: int = 1
    orderers: int = 1
    mode: str = STREAM
    block_size: int = 10
    block_timeout_ms: float = 2000.0
    sig_workers: int = 6
    queue_capacity: int = 256
    stripes: int = 64
    cache: bool = True
    flush_bytes: int = 64 * 1024
    flush_timeout_ms: float = 100.0
    fsync: bool = True
    orderer_fsync_per_entry: bool = False
    crypto: str = REAL
    clients: int = 32
    checkpoint_interval_s: float = 10.0
    host: str = "127.0.0.1"
    base_port: int = 0
    serve_peers: bool = True
    policy_kv: str = ""
    policy_scm: str = ""

    def __post_init__(self) -> None:
        if self.peers < 1 or self.orderers < 1:
            raise ValueError("need at least one peer and one orderer")
        if self.mode not in (STREAM, BLOCK):
            raise ValueError(f"mode must be stream or block, got {self.mode!r}")
        if self.crypto not in (REAL, NULL):
            raise ValueError(f"crypto must be real or null, got {self.crypto!r}")

    @property
    def peer_ids(self) -> list[str]:
        return [f"peer{i}" for i in range(self.peers)]

    def policies(self) -> dict[str, EndorsementPolicy]:
        ids = tuple(self.peer_ids)
        defaults = {"kv": f"1:{','.join(ids)}", "scm": f"{min(2, len(ids))}:{','.join(ids)}"}
        out = {}
        for cc, default in defaults.items():
            k, endorsers = parse_policy(getattr(self, f"policy_{cc}") or default)
            out[cc] = EndorsementPolicy(k, endorsers)
        return out

    def batcher(self) -> BatcherConfig:
        return BatcherConfig(self.flush_bytes, self.flush_timeout_ms,
                             FSYNC_PER_FLUSH if self.fsync else FSYNC_NEVER)

    def orderer_config(self) -> OrdererConfig:
        return OrdererConfig(mode=self.mode, block_size=self.block_size,
                             block_timeout_ms=self.block_timeout_ms, batcher=self.batcher(),
                             fsync_per_entry=self.orderer_fsync_per_entry)

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(sig_workers=self.sig_workers, queue_capacity=self.queue_capacity,
                              mode=self.mode, cache=self.cache)

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    # -- key=value files -------------------------------------------------------

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "NetworkConfig":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for raw_key, raw in values.items():
            key = raw_key.replace("-", "_").replace(".", "_")
            if key not in known:
                raise ValueError(f"unknown network setting {raw_key!r}")
            kwargs[key] = _coerce(known[key].type, str(raw))
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "NetworkConfig":
        return cls.from_mapping(parse_kv_file(path))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name.startswith("policy_"):
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name}={('on' if v else 'off') if isinstance(v, bool) else v}")
        for cc, p in self.policies().items():
            lines.append(f"policy.{cc}={p.k}:{','.join(p.endorsers)}")
        return "\n".join(lines) + "\n"


def _coerce(type_name, raw: str):
    t = type_name if isinstance(type_name, str) else type_name.__name__
    if t == "bool":
        try:
            return _BOOL[raw.lower()]
        except KeyError:
            raise ValueError(f"expected on/off, got {raw!r}") from None
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    return raw


def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host, int(port)


def read_endpoints(data_dir: str | Path) -> tuple[list[tuple[str, int]], list[tuple[str, int]]]:
    """``(orderer endpoints, peer endpoints)`` from ``endpoints.conf``."""
    kv = parse_kv_file(Path(data_dir) / "endpoints.conf")
    orderers = [_parse_addr(v) for k, v in sorted(kv.items()) if k.startswith("orderer.")]
    peers = [_parse_addr(v) for k, v in sorted(kv.items()) if k.startswith("peer.")]
    return orderers, peers


def read_client_keys(data_dir: str | Path) -> list[Identity]:
    out = []
    for line in (Path(data_dir) / "client_keys").read_text().splitlines():
        if line.strip():
            ident, _, hexkey = line.partition(",")
            out.append(Identity.from_private_bytes(ident.strip(), bytes.fromhex(hexkey.strip())))
    return out


class Network:
    """Orderers and peers in this process, talking over loopback sockets."""

    def __init__(self, config: NetworkConfig, data_dir: str | Path, fresh: bool = True) -> None:
        self.config = config
        self.dir = Path(data_dir)
        if fresh and self.dir.exists():
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.orderers: list[OrderingNode] = []
        self.peers: list[Peer] = []
        self.servers: list[PeerServer] = []
        self.orderer_addrs: list[tuple[str, int]] = []
        self._bootstrap()

    def _bootstrap(self) -> None:
        cfg = self.config
        keys_file = self.dir / "peer_keys"
        if keys_file.exists():
            self.peer_identities = [Identity.from_private_bytes(i, bytes.fromhex(k)) for i, k in
                                    (line.split(",") for line in keys_file.read_text().split())]
            self.client_identities = read_client_keys(self.dir)
        else:
            self.peer_identities = [Identity.generate(p) for p in cfg.peer_ids]
            self.client_identities = [Identity.generate(f"client{i}") for i in range(cfg.clients)]
            keys_file.write_text("".join(f"{i.id},{i.private_bytes().hex()}\n" for i in self.peer_identities))
            (self.dir / "client_keys").write_text(
                "".join(f"{i.id}, {i.private_bytes().hex()}\n" for i in self.client_identities))
            write_identities(self.dir / "identities.txt", self.peer_identities + self.client_identities)
        (self.dir / "network.conf").write_text(cfg.to_text())
        self.membership = Membership(read_identities(self.dir / "identities.txt"), cfg.crypto)
        self.policies = cfg.policies()

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> "Network":
        cfg = self.config
        listeners = [bind_listener((cfg.host, cfg.base_port + i if cfg.base_port else 0))
                     for i in range(cfg.orderers)]
        self.orderer_addrs = [s.getsockname()[:2] for s in listeners]
        ocfg = cfg.orderer_config()
        self.orderers = [OrderingNode(i, self.orderer_addrs, self.dir / f"orderer{i}", ocfg, listeners[i])
                         for i in range(cfg.orderers)]
        for node in self.orderers:
            node.start()
        wait_for_leader(self.orderers)
        for i, ident in enumerate(self.peer_identities):
            self.peers.append(self._make_peer(i, ident).start(self.orderer_addrs))
        if cfg.serve_peers:
            for i, peer in enumerate(self.peers):
                port = cfg.base_port + cfg.orderers + i if cfg.base_port else 0
                self.servers.append(PeerServer(peer, (cfg.host, port)))
        self._write_endpoints()
        return self

    def _make_peer(self, i: int, ident: Identity) -> Peer:
        cfg = self.config
        return Peer(ident.id, self.dir / ident.id, ident, self.membership, self.policies,
                    crypto=cfg.crypto, pipeline=cfg.pipeline(), batcher=cfg.batcher(),
                    stripes=cfg.stripes, checkpoint_interval_s=cfg.checkpoint_interval_s)

    def _write_endpoints(self) -> None:
        lines = [f"orderer.{i}={h}:{p}" for i, (h, p) in enumerate(self.orderer_addrs)]
        lines += [f"peer.{i}={h}:{p}" for i, (h, p) in enumerate(s.address for s in self.servers)]
        (self.dir / "endpoints.conf").write_text("\n".join(lines) + "\n")

    def stop(self) -> None:
        for s in self.servers:
            s.close()
        for p in self.peers:
            p.stop()
        for o in self.orderers:
            if o.running:
                o.stop()

    def __enter__(self) -> "Network":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    # -- fault injection -----------------------------------------------------------

    def leader(self) -> OrderingNode:
        return wait_for_leader([o for o in self.orderers if o.running])

    def kill_orderer(self, i: int) -> None:
        self.orderers[i].kill()

    def restart_orderer(self, i: int) -> OrderingNode:
        node = OrderingNode(i, self.orderer_addrs, self.dir / f"orderer{i}", self.config.orderer_config())
        self.orderers[i] = node.start()
        return node

    def restart_peer(self, i: int, crash: bool = True) -> Peer:
        old = self.peers[i]
        old.crash() if crash else old.stop()
        peer = self._make_peer(i, self.peer_identities[i]).start(self.orderer_addrs)
        self.peers[i] = peer
        if self.servers:
            self.servers[i].peer = peer
        return peer

    @property
    def peer_ledger_paths(self) -> list[Path]:
        return [self.dir / p.id / "ledger.dat" for p in self.peers]

    def wait_committed(self, seq: int, timeout: float = 30.0) -> bool:
        return all(p.validator.wait_idle(seq, timeout) for p in self.peers)
