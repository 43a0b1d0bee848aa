"""Kill the ordering leader in the middle of a run and watch the network carry on.

Run with ``python3 demos/leader_crash.py``.
"""
import tempfile
import threading
import time

from streamledger.bench import Target, run_closed_loop
from streamledger.bench.workload import preset
from streamledger.network import Network, NetworkConfig

cfg = NetworkConfig(peers=2, orderers=3, clients=4, fsync=False)
with tempfile.TemporaryDirectory() as tmp, Network(cfg, tmp) as net:
    before = net.leader().id
    print("leader before:", before)

    def assassin():
        while net.peers[0].last_committed_seq < 150:
            time.sleep(0.01)
        print(f"killing orderer {before} at seq {net.peers[0].last_committed_seq}")
        net.kill_orderer(before)

    threading.Thread(target=assassin, daemon=True).start()
    report = run_closed_loop(preset("ycsb90", 600, 4, key_space=2000), Target.from_network(net))
    print("leader after:", net.leader().id)
    print(report.summary())
    digests = {p.state.digest() for p in net.peers}
    print("peers agree on state:", len(digests) == 1)
