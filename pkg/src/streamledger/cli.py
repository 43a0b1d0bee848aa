"""Command line: ``net start``, ``bench run``, ``ledger verify``, ``ledger replay``."""
from __future__ import annotations

import argparse
import logging
import signal
import sys
import tempfile
import threading
from pathlib import Path

from .network import Network, NetworkConfig
from .replay import replay_file, verify_file

# flag -> NetworkConfig field
NET_FLAGS = {
    "peers": int, "orderers": int, "mode": str, "block_size": int, "block_timeout_ms": float,
    "sig_workers": int, "stripes": int, "flush_bytes": int, "flush_timeout_ms": float,
    "fsync": str, "crypto": str, "queue_capacity": int, "cache": str, "base_port": int,
}


def _add_net_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("network")
    g.add_argument("--config", help="key=value file; explicit flags override it")
    g.add_argument("--peers", type=int)
    g.add_argument("--orderers", type=int)
    g.add_argument("--mode", choices=["stream", "block"])
    g.add_argument("--block-size", type=int)
    g.add_argument("--block-timeout-ms", type=float)
    g.add_argument("--sig-workers", type=int)
    g.add_argument("--queue-capacity", type=int)
    g.add_argument("--stripes", type=int)
    g.add_argument("--cache", choices=["on", "off"])
    g.add_argument("--flush-bytes", type=int)
    g.add_argument("--flush-timeout-ms", type=float)
    g.add_argument("--fsync", choices=["on", "off"])
    g.add_argument("--crypto", choices=["real", "null"])
    g.add_argument("--base-port", type=int)


def network_config(args: argparse.Namespace) -> NetworkConfig:
    values: dict[str, str] = {}
    if args.config:
        from .replay import parse_kv_file
        values.update(parse_kv_file(args.config))
    for name in NET_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = str(v)
    return NetworkConfig.from_mapping(values)


def cmd_net_start(args: argparse.Namespace) -> int:
    cfg = network_config(args)
    data_dir = Path(args.data_dir or tempfile.mkdtemp(prefix="streamledger-"))
    net = Network(cfg, data_dir, fresh=not args.keep)
    net.start()
    print(f"network up: {cfg.orderers} orderer(s), {cfg.peers} peer(s), mode={cfg.mode}")
    print(f"data dir: {data_dir}  (endpoints in endpoints.conf)", flush=True)
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    try:
        while not done.wait(0.5):
            pass
    finally:
        net.stop()
    print("network stopped")
    return 0


def cmd_bench_run(args: argparse.Namespace) -> int:
    from .bench import SOCKET, Target, preset, run_benchmark, run_closed_loop

    if args.connect:
        spec = preset(args.workload, args.ops, args.clients, args.seed)
        report = run_closed_loop(spec, Target.from_data_dir(args.connect), timeout=args.timeout)
        report.label = f"{args.workload} (connected to {args.connect})"
        report.meta["path"] = SOCKET
    else:
        cfg = network_config(args)
        res = run_benchmark(args.workload, args.ops, args.clients, cfg, data_dir=args.data_dir,
                            seed=args.seed, path=args.path)
        report = res.report
        report.meta["data_dir"] = str(res.data_dir)
    if args.out:
        report.write_csv(args.out)
    print(report.summary())
    return 0


def cmd_ledger_verify(args: argparse.Namespace) -> int:
    rep = verify_file(args.path, check_flags=not args.chain_only)
    status = "OK" if rep.ok else "FAILED"
    detail = f" ({rep.reason})" if rep.reason else ""
    print(f"{status}: {rep.records} records{detail}")
    return 0 if rep.ok else 1


def cmd_ledger_replay(args: argparse.Namespace) -> int:
    res = replay_file(args.path)
    print(f"records:       {len(res.flags)}")
    print(f"valid:         {sum(res.flags)}")
    print(f"chain:         {'ok' if res.chain_ok else 'BROKEN'}")
    print(f"flag mismatch: {len(res.mismatches)}" + (f" first at seq {res.mismatches[0]}" if res.mismatches else ""))
    print(f"state digest:  {res.digest}")
    return 0 if res.ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="streamledger", description="Streaming permissioned ledger.")
    ap.add_argument("-v", "--verbose", action="store_true")
    top = ap.add_subparsers(dest="group", required=True)

    net = top.add_parser("net").add_subparsers(dest="cmd", required=True)
    p = net.add_parser("start", help="run orderers and peers in the foreground")
    _add_net_flags(p)
    p.add_argument("--data-dir")
    p.add_argument("--keep", action="store_true", help="reuse existing data instead of wiping it")
    p.set_defaults(fn=cmd_net_start)

    bench = top.add_parser("bench").add_subparsers(dest="cmd", required=True)
    p = bench.add_parser("run", help="run one closed-loop benchmark")
    p.add_argument("--workload", required=True, choices=["ycsb90", "ycsb50", "scm95", "scm99"])
    p.add_argument("--ops", type=int, default=10_000)
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="per-operation CSV")
    p.add_argument("--path", choices=["inproc", "socket"], default="inproc")
    p.add_argument("--timeout", type=float, default=10.0, help="per-op timeout, seconds")
    p.add_argument("--connect", metavar="DIR", help="data dir of a running `net start`")
    p.add_argument("--data-dir")
    _add_net_flags(p)
    p.set_defaults(fn=cmd_bench_run)

    led = top.add_parser("ledger").add_subparsers(dest="cmd", required=True)
    p = led.add_parser("verify", help="check the hash chain (and validity flags if possible)")
    p.add_argument("--path", required=True)
    p.add_argument("--chain-only", action="store_true")
    p.set_defaults(fn=cmd_ledger_verify)
    p = led.add_parser("replay", help="serial re-execution of a ledger")
    p.add_argument("--path", required=True)
    p.set_defaults(fn=cmd_ledger_replay)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
