"""Run a small benchmark, then show what ``ledger verify`` and ``ledger replay`` catch.

Run with ``python3 demos/tamper.py``.
"""
import tempfile
from pathlib import Path

from streamledger.bench import run_benchmark
from streamledger.ledger import RECORD_HEADER_LEN
from streamledger.network import NetworkConfig
from streamledger.replay import read_ledger, replay_file, verify_file

with tempfile.TemporaryDirectory() as tmp:
    res = run_benchmark("ycsb50", 300, 4, NetworkConfig(peers=2), tmp, key_space=50)
    path = Path(res.ledger_paths[0])
    print("clean ledger:", verify_file(path).reason or "ok")
    rep = replay_file(path)
    print(f"serial replay: {len(rep.flags)} records, {len(rep.mismatches)} flag mismatches, "
          f"digest equal to live peer: {rep.digest == res.live_digests[0]}")

    raw = bytearray(path.read_bytes())
    pristine = bytes(raw)

    # A byte inside a transaction breaks the hash chain.
    raw[RECORD_HEADER_LEN + 20] ^= 0x01
    path.write_bytes(bytes(raw))
    print("payload byte flipped:", verify_file(path).reason)

    # The validity byte sits outside the chain; replaying the flags catches it.
    raw[:] = pristine
    first = read_ledger(path)[0]
    second = RECORD_HEADER_LEN + len(first.tx_bytes)
    raw[second + 12] ^= 0x01
    path.write_bytes(bytes(raw))
    print("validity byte flipped, chain only:", verify_file(path, check_flags=False).ok)
    print("validity byte flipped, with flag audit:", verify_file(path).reason)
