"""Run workloads against either store in either mode and collect exact counters."""

from __future__ import annotations

import hashlib
import json
import logging
import random
import threading
import time
from dataclasses import asdict, dataclass, field

from ..bpfkv import BpfKV, default_value
from ..cluster import LocalCluster, RemoteCluster
from ..lsm import LsmOptions, LsmStore
from .workload import INSERT, READ, RMW, UPDATE, Op, WorkloadSpec, generate

log = logging.getLogger(__name__)

SYSTEMS = ("lsmkv", "bpfkv")
MODES = ("baseline", "pushdown")


@dataclass
class CacheConfig:
    cache_bytes: int = 8 << 20
    sampling_rate: float = 0.01
    data_cache: bool = True  # False: no data blocks cached, pushdown caches nothing
    bloom_bits_per_key: int | None = None
    cached_levels: int = 0  # bpfkv only
    depth: int | None = None  # bpfkv only


@dataclass
class RemoteTarget:
    data: tuple[str, int]
    sync: tuple[str, int]
    backing: str
    capacity_blocks: int
    block_size: int = 512


@dataclass
class Metrics:
    system: str
    mode: str
    workload: str
    distribution: str
    n_keys: int
    n_ops: int
    seed: int
    elapsed_s: float = 0.0
    throughput_ops_s: float = 0.0
    latency_p50_us: float = 0.0
    latency_p99_us: float = 0.0
    round_trips: int = 0
    device_reads: int = 0
    resubmissions: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    sampled_count: int = 0
    mismatch_count: int = 0
    fallback_count: int = 0
    cache_hit_rate: float = 0.0
    results_digest: str = ""
    ops_by_kind: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [(k, v) for k, v in self.to_dict().items() if k != "ops_by_kind"]
        rows.append(("ops_by_kind", ", ".join(f"{k}={v}" for k, v in sorted(self.ops_by_kind.items()))))
        width = max(len(k) for k, _ in rows)
        out = []
        for k, v in rows:
            if isinstance(v, float):
                v = f"{v:.4g}"
            out.append(f"{k:<{width}}  {v}")
        return "\n".join(out)


def lsm_key(i: int) -> bytes:
    return b"user%012d" % i


def make_value(key: int, gen: int, size: int) -> bytes:
    """Deterministic value for the ``gen``-th write of ``key``."""
    seed = key.to_bytes(8, "little") + gen.to_bytes(4, "little")
    out = bytearray()
    while len(out) < size:
        out += hashlib.blake2b(seed + len(out).to_bytes(4, "little")).digest()
    return bytes(out[:size])


def _percentile(sorted_vals: list[float], q: float) -> float:
    if not sorted_vals:
        return 0.0
    i = min(len(sorted_vals) - 1, int(q * len(sorted_vals)))
    return sorted_vals[i]


class _LsmSystem:
    def __init__(self, client, spec: WorkloadSpec, cfg: CacheConfig, mode: str):
        opts = LsmOptions(cache_bytes=cfg.cache_bytes, sampling_rate=cfg.sampling_rate,
                          cache_data_blocks=cfg.data_cache,
                          pushdown_cache="final" if cfg.data_cache else "none",
                          bloom_bits_per_key=cfg.bloom_bits_per_key, pushdown=mode == "pushdown",
                          seed=spec.seed, max_value_bytes=max(1024, spec.value_size))
        self.db = LsmStore(client, opts)
        self.gens: dict[int, int] = {}
        self._lock = threading.Lock()
        # shuffled load so key ranges overlap across levels, as after real churn
        order = list(range(spec.n_keys))
        random.Random(spec.seed ^ 0x5EED).shuffle(order)
        for i in order:
            self.db.put(lsm_key(i), make_value(i, 0, spec.value_size))
        self.db.flush()
        client.syncer.sync_all()

    def _next_gen(self, key: int) -> int:
        with self._lock:
            g = self.gens.get(key, 0) + 1
            self.gens[key] = g
            return g

    def apply(self, op: Op):
        if op.kind == READ:
            return self.db.get(lsm_key(op.key))
        if op.kind == RMW:
            old = self.db.get(lsm_key(op.key))
            size = op.value_size or (len(old) if old else 1)
            v = bytes(a ^ b for a, b in zip(make_value(op.key, self._next_gen(op.key), size),
                                            (old or b"").ljust(size, b"\0")))
            self.db.put(lsm_key(op.key), v)
            return old
        self.db.put(lsm_key(op.key), make_value(op.key, self._next_gen(op.key),
                                                max(1, op.value_size)))
        return None

    def reset(self) -> None:
        cache = self.db.cache
        cache.hits = cache.misses = 0
        self.db.sampling.decisions = self.db.sampling.sampled = 0
        self.db.stats.sampled = 0

    def hit_rate(self) -> float:
        return self.db.cache.hit_rate

    def sampled(self) -> int:
        return self.db.stats.sampled

    def close(self) -> None:
        pass


class _BpfSystem:
    def __init__(self, client, spec: WorkloadSpec, cfg: CacheConfig, mode: str):
        if not spec.read_only:
            raise ValueError("bpfkv is read-only; use ycsb_c or uniform_read")
        self.mode = mode
        self.kv = BpfKV.build(client, "bpfkv.db", spec.n_keys, cfg.depth,
                              keys=list(range(spec.n_keys)), value_fn=default_value,
                              seed=spec.seed, cached_levels=cfg.cached_levels)

    def apply(self, op: Op):
        if op.kind != READ:
            raise ValueError("bpfkv is read-only")
        return self.kv.get(op.key, self.mode)

    def reset(self) -> None:
        pass

    def hit_rate(self) -> float:
        return 0.0

    def sampled(self) -> int:
        return 0

    def close(self) -> None:
        self.kv.close()


def _capacity_for(spec: WorkloadSpec, system: str) -> int:
    per_key = (spec.value_size + 40) if system == "lsmkv" else 96
    est = (spec.n_keys + spec.n_ops) * per_key * 8 // 512
    return max(1 << 14, est)


def run(spec: WorkloadSpec, system: str = "lsmkv", mode: str = "pushdown",
        cache_config: CacheConfig | None = None, remote: RemoteTarget | None = None,
        workers: int = 1, ops: list[Op] | None = None, background_sync: bool = False) -> Metrics:
    """Load a store, replay the op stream, and report exact counters.

    Counters and cache statistics cover the replay only, not the load.
    ``ops`` overrides the generated stream (trace replay).
    """
    if system not in SYSTEMS:
        raise ValueError(f"system must be one of {SYSTEMS}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    cfg = cache_config or CacheConfig()
    if remote is not None:
        cluster = RemoteCluster(remote.data, remote.sync, remote.backing, remote.capacity_blocks,
                                remote.block_size)
    else:
        cluster = LocalCluster(capacity_blocks=_capacity_for(spec, system),
                               background_sync=background_sync)
    try:
        cls = _LsmSystem if system == "lsmkv" else _BpfSystem
        sysobj = cls(cluster.client, spec, cfg, mode)
        stream = list(generate(spec)) if ops is None else ops
        counters = cluster.client.counters
        counters.reset()
        sysobj.reset()
        results: list = [None] * len(stream)
        latencies: list[float] = [0.0] * len(stream)

        def work(idx: range):
            for i in idx:
                t = time.perf_counter()
                results[i] = sysobj.apply(stream[i])
                latencies[i] = time.perf_counter() - t

        t0 = time.perf_counter()
        if workers <= 1:
            work(range(len(stream)))
        else:
            threads = [threading.Thread(target=work, args=(range(w, len(stream), workers),))
                       for w in range(workers)]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
        elapsed = time.perf_counter() - t0
        sysobj.close()
    finally:
        cluster.close()

    digest = hashlib.sha256()
    kinds: dict[str, int] = {}
    for op, res in zip(stream, results):
        kinds[op.kind] = kinds.get(op.kind, 0) + 1
        digest.update(b"%s:%d:" % (op.kind.encode(), op.key))
        digest.update(b"-" if res is None else hashlib.sha256(res).digest())
    lat = sorted(latencies)
    c = counters.as_dict()
    return Metrics(system, mode, spec.mix, spec.dist, spec.n_keys, len(stream), spec.seed,
                   elapsed_s=elapsed,
                   throughput_ops_s=len(stream) / elapsed if elapsed > 0 else 0.0,
                   latency_p50_us=_percentile(lat, 0.50) * 1e6,
                   latency_p99_us=_percentile(lat, 0.99) * 1e6,
                   round_trips=c["round_trips"], device_reads=c["device_reads"],
                   resubmissions=c["resubmissions"], bytes_sent=c["bytes_sent"],
                   bytes_received=c["bytes_received"], sampled_count=sysobj.sampled(),
                   mismatch_count=c["mismatches"], fallback_count=c["fallbacks"],
                   cache_hit_rate=sysobj.hit_rate(), results_digest=digest.hexdigest(),
                   ops_by_kind=kinds)


DEFAULT_RATES = (0.0, 0.001, 0.01, 0.1, 1.0)


def sweep_sampling(spec: WorkloadSpec, rates=DEFAULT_RATES,
                   cache_config: CacheConfig | None = None,
                   remote: RemoteTarget | None = None) -> list[Metrics]:
    """The same pushdown LSM workload at each sampling rate."""
    base = cache_config or CacheConfig()
    out = []
    for r in rates:
        cfg = CacheConfig(**{**asdict(base), "sampling_rate": r})
        out.append(run(spec, "lsmkv", "pushdown", cfg, remote))
    return out


def sweep_table(results: list[Metrics], rates) -> str:
    head = f"{'rate':>8} {'ops/s':>10} {'hit_rate':>9} {'bytes/op':>10} {'rtt/op':>7} {'sampled':>8}"
    lines = [head]
    for r, m in zip(rates, results):
        n = max(1, m.n_ops)
        lines.append(f"{r:>8g} {m.throughput_ops_s:>10.0f} {m.cache_hit_rate:>9.3f} "
                     f"{(m.bytes_sent + m.bytes_received) / n:>10.1f} {m.round_trips / n:>7.2f} "
                     f"{m.sampled_count:>8d}")
    return "\n".join(lines)
