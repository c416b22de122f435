"""Command line: ``storepush target`` and ``storepush bench {run,sweep}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading

from .extent_store import DEFAULT_BLOCK_SIZE, BlockDevice
from .sync import ReplicaStore
from .target import TargetDaemon, TargetServer

log = logging.getLogger("storepush")


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port in {text!r}") from None


def _capacity(backing: str, block_size: int, requested: int | None) -> int:
    if requested:
        return requested
    if os.path.exists(backing) and os.path.getsize(backing):
        return os.path.getsize(backing) // block_size
    raise SystemExit("--capacity-blocks is required for a new backing file")


def cmd_target(args) -> int:
    cap = _capacity(args.backing, args.block_size, args.capacity_blocks)
    device = BlockDevice(cap, args.block_size, args.backing)
    target = TargetServer(device, ReplicaStore(args.block_size))
    daemon = TargetDaemon(target, args.listen, args.sync_listen)
    daemon.start()
    stop = threading.Event()

    def dump(*_):
        print(target.stats_json(), file=sys.stderr, flush=True)

    if hasattr(signal, "SIGUSR1"):
        signal.signal(signal.SIGUSR1, dump)
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    h, p = daemon.data_address
    sh, sp = daemon.sync_address
    # one parseable line so wrappers can learn ephemeral ports
    print(json.dumps({"data": f"{h}:{p}", "sync": f"{sh}:{sp}", "blocks": cap}), flush=True)
    try:
        while not stop.wait(0.2):
            pass
    finally:
        daemon.shutdown()
        dump()
        device.close()
    return 0


def _spec(args):
    from .bench import WorkloadSpec
    return WorkloadSpec(args.workload, args.distribution, args.keys, args.ops, args.value_size,
                        args.seed)


def _cache(args, rate=None):
    from .bench import CacheConfig
    return CacheConfig(cache_bytes=int(args.cache_mb * (1 << 20)),
                       sampling_rate=args.sampling if rate is None else rate,
                       data_cache=not args.no_data_cache, bloom_bits_per_key=args.bloom_bits,
                       cached_levels=args.cached_levels, depth=args.depth)


def _remote(args):
    from .bench import RemoteTarget
    if args.target is None:
        return None
    if args.sync_target is None or args.backing is None:
        raise SystemExit("--target needs --sync-target and --backing (the target's backing file)")
    cap = _capacity(args.backing, args.block_size, args.capacity_blocks)
    return RemoteTarget(args.target, args.sync_target, args.backing, cap, args.block_size)


def cmd_bench_run(args) -> int:
    from .bench import load_trace, run
    ops = load_trace(args.trace) if args.trace else None
    m = run(_spec(args), args.system, args.mode, _cache(args), _remote(args), args.workers, ops)
    print(m.table())
    if args.report:
        with open(args.report, "w") as f:
            f.write(m.to_json() + "\n")
    return 0


def cmd_bench_sweep(args) -> int:
    from .bench.runner import sweep_sampling, sweep_table
    results = sweep_sampling(_spec(args), args.rates, _cache(args), _remote(args))
    print(sweep_table(results, args.rates))
    if args.report:
        with open(args.report, "w") as f:
            json.dump([{"sampling_rate": r, **m.to_dict()} for r, m in zip(args.rates, results)],
                      f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def _bench_common(p: argparse.ArgumentParser) -> None:
    from .bench.workload import DISTRIBUTIONS, MIXES
    p.add_argument("--workload", default="ycsb_c", choices=sorted(MIXES))
    p.add_argument("--distribution", choices=DISTRIBUTIONS, default=None)
    p.add_argument("--keys", type=int, default=100_000)
    p.add_argument("--ops", type=int, default=100_000)
    p.add_argument("--value-size", type=int, default=100)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--cache-mb", type=float, default=8.0)
    p.add_argument("--no-data-cache", action="store_true",
                   help="cache no data blocks; pushdown results are not cached either")
    p.add_argument("--bloom-bits", type=int, default=None, help="bloom filter bits per key")
    p.add_argument("--cached-levels", type=int, default=0, help="bpfkv: client-cached levels")
    p.add_argument("--depth", type=int, default=None, help="bpfkv: tree depth incl. log read")
    p.add_argument("--target", type=parse_addr, default=None, help="data address host:port")
    p.add_argument("--sync-target", type=parse_addr, default=None)
    p.add_argument("--backing", default=None, help="target's backing file (shared)")
    p.add_argument("--capacity-blocks", type=int, default=None)
    p.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    p.add_argument("--report", default=None, help="write the JSON report here")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="storepush")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("target", help="run the storage target daemon")
    t.add_argument("--listen", type=parse_addr, default=("127.0.0.1", 4420))
    t.add_argument("--sync-listen", type=parse_addr, default=("127.0.0.1", 4421))
    t.add_argument("--backing", required=True)
    t.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    t.add_argument("--capacity-blocks", type=int, default=None)
    t.set_defaults(func=cmd_target)

    b = sub.add_parser("bench", help="benchmarks")
    bsub = b.add_subparsers(dest="bench_command", required=True)
    r = bsub.add_parser("run", help="one workload, one system, one mode")
    r.add_argument("--system", choices=("lsmkv", "bpfkv"), default="lsmkv")
    r.add_argument("--mode", choices=("baseline", "pushdown"), default="pushdown")
    r.add_argument("--sampling", type=float, default=0.01)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--trace", default=None, help="CSV trace (op,key,value_size) to replay")
    _bench_common(r)
    r.set_defaults(func=cmd_bench_run)
    s = bsub.add_parser("sweep", help="pushdown LSM workload across sampling rates")
    s.add_argument("--rates", type=float, nargs="+", default=[0.0, 0.001, 0.01, 0.1, 1.0])
    s.add_argument("--sampling", type=float, default=0.01, help=argparse.SUPPRESS)
    _bench_common(s)
    s.set_defaults(func=cmd_bench_sweep)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
