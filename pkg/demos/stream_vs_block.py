"""Same single-client YCSB-90 workload, once streamed and twice through the block baseline.

Run with ``python3 demos/stream_vs_block.py``. Real crypto, fsync on, loopback only.
"""
import tempfile

from streamledger.bench import fabric_profile, run_benchmark
from streamledger.network import NetworkConfig

base = NetworkConfig(peers=1, orderers=1)
runs = {
    "stream": (base, 200),
    "block(1)": (fabric_profile(base, 1), 200),
    "block(10, 1 s)": (fabric_profile(base, 10, 1000.0), 30),  # each op waits for the timeout
}
with tempfile.TemporaryDirectory() as tmp:
    for label, (cfg, ops) in runs.items():
        res = run_benchmark("ycsb90", ops, 1, cfg, f"{tmp}/{label}", seed=1)
        lat = res.report.aggregates["latency_ms"]
        commit = res.report.aggregates["peer_commit_ms"]
        print(f"{label:<16} p50 end-to-end {lat['p50']:8.2f} ms   p50 peer commit {commit['p50']:7.3f} ms")
