"""Start a network, run one benchmark against it, and collect audit material."""
from __future__ import annotations

import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from ..network import Network, NetworkConfig
from .driver import INPROC, Target, run_closed_loop
from .report import RunReport
from .workload import SCM, preset


@dataclass
class BenchResult:
    report: RunReport
    data_dir: Path
    ledger_paths: list[Path]
    live_digests: list[str]
    last_seq: int
    flush_metrics: dict = field(default_factory=dict)


def fabric_profile(cfg: NetworkConfig, block_size: int, block_timeout_ms: float = 1000.0) -> NetworkConfig:
    """The block-batching baseline: one lock for the state, no deserialization cache."""
    return cfg.replace(mode="block", block_size=block_size, block_timeout_ms=block_timeout_ms,
                       stripes=1, cache=False)


def run_benchmark(workload: str, ops: int, clients: int, config: NetworkConfig,
                  data_dir: str | Path | None = None, seed: int = 0, path: str = INPROC,
                  csv_out: str | Path | None = None, **spec_overrides) -> BenchResult:
    spec = preset(workload, ops, clients, seed, **spec_overrides)
    if spec.kind == SCM and config.peers == 1 and not config.policy_scm:
        config = config.replace(policy_scm="1:peer0")
    if clients > config.clients:
        config = config.replace(clients=clients)
    if data_dir is None:
        data_dir = tempfile.mkdtemp(prefix=f"bench-{workload}-")
    net = Network(config, data_dir)
    net.start()
    try:
        report = run_closed_loop(spec, Target.from_network(net, path))
        last = max((o.commit_index for o in net.orderers if o.running), default=0)
        net.wait_committed(last)
        digests = [p.state.digest() for p in net.peers]
        flush = {
            "ledger_flushes": net.peers[0].ledger.log.metrics.flushes,
            "ledger_fsyncs": net.peers[0].ledger.log.metrics.fsyncs,
            "block_syncs": net.peers[0].validator.metrics.block_syncs,
            "cache_hits": (net.peers[0].validator.cache.hits if net.peers[0].validator.cache else 0),
        }
    finally:
        net.stop()
    report.label = f"{workload} mode={config.mode}" + (
        f" block_size={config.block_size}" if config.mode == "block" else "")
    report.meta.update({"mode": config.mode, "crypto": config.crypto, "orderers": config.orderers,
                        "peers": config.peers, "sig_workers": config.sig_workers})
    if csv_out is not None:
        report.write_csv(csv_out)
    return BenchResult(report, Path(data_dir), net.peer_ledger_paths, digests, last, flush)
