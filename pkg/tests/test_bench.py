import json

import pytest

from storepush.bench import CacheConfig, WorkloadSpec, ZipfianGenerator, generate, load_trace, run
from storepush.bench.runner import Metrics, lsm_key, make_value, sweep_sampling
from storepush.bench.workload import MIXES
from storepush.cluster import LocalCluster
from storepush.lsm import LsmOptions, LsmStore

REPORT_FIELDS = {
    "system", "mode", "workload", "distribution", "n_keys", "n_ops", "seed", "elapsed_s",
    "throughput_ops_s", "latency_p50_us", "latency_p99_us", "round_trips", "device_reads",
    "resubmissions", "bytes_sent", "bytes_received", "sampled_count", "mismatch_count",
    "fallback_count", "cache_hit_rate", "results_digest", "ops_by_kind"}


def test_same_seed_same_stream():
    for mix in MIXES:
        s = WorkloadSpec(mix, n_keys=500, n_ops=300, seed=9)
        assert list(generate(s)) == list(generate(s))
    a = list(generate(WorkloadSpec("ycsb_b", n_keys=500, n_ops=300, seed=1)))
    b = list(generate(WorkloadSpec("ycsb_b", n_keys=500, n_ops=300, seed=2)))
    assert a != b


def test_mix_proportions():
    ops = list(generate(WorkloadSpec("ycsb_d", n_keys=1000, n_ops=20000, seed=3)))
    inserts = [o for o in ops if o.kind == "insert"]
    assert 0.04 < len(inserts) / len(ops) < 0.06
    assert [o.key for o in inserts] == list(range(1000, 1000 + len(inserts)))
    reads = [o.key for o in ops if o.kind == "read"]
    # latest skew: most reads land on recent keys
    assert sum(k >= 900 for k in reads) / len(reads) > 0.3
    f = list(generate(WorkloadSpec("ycsb_f", n_keys=1000, n_ops=10000, seed=3)))
    assert 0.45 < sum(o.kind == "rmw" for o in f) / len(f) < 0.55


def test_zipfian_is_skewed():
    z = ZipfianGenerator(1000, 0.99)
    z.rng.seed(1)
    draws = [z.next() for _ in range(50000)]
    assert all(0 <= d < 1000 for d in draws)
    top = sum(d < 10 for d in draws) / len(draws)
    assert top > 0.3
    assert draws.count(0) > draws.count(1) > draws.count(50)


def test_bad_spec():
    with pytest.raises(ValueError):
        WorkloadSpec("ycsb_z")
    with pytest.raises(ValueError):
        WorkloadSpec("ycsb_a", distribution="pareto")
    with pytest.raises(ValueError):
        run(WorkloadSpec("ycsb_a", n_keys=10, n_ops=10), "bpfkv", "pushdown")


def test_paired_uniform_run_no_data_cache():
    spec = WorkloadSpec("uniform_read", n_keys=5000, n_ops=1500, seed=4)
    cfg = CacheConfig(cache_bytes=1 << 20, data_cache=False)
    base = run(spec, "lsmkv", "baseline", cfg)
    push = run(spec, "lsmkv", "pushdown", cfg)
    assert push.results_digest == base.results_digest
    assert push.round_trips < base.round_trips
    assert push.device_reads / push.n_ops > 1
    assert set(push.to_dict()) == REPORT_FIELDS


def test_mode_equivalence_with_writes():
    spec = WorkloadSpec("ycsb_f", n_keys=2000, n_ops=2000, seed=5)
    a = run(spec, "lsmkv", "baseline", CacheConfig(cache_bytes=64 << 10))
    b = run(spec, "lsmkv", "pushdown", CacheConfig(cache_bytes=64 << 10))
    assert a.results_digest == b.results_digest
    assert b.ops_by_kind == a.ops_by_kind


def test_zipfian_hits_cache_more_than_uniform():
    cfg = CacheConfig(cache_bytes=256 << 10, sampling_rate=1.0)
    z = run(WorkloadSpec("ycsb_c", "zipfian", 5000, 3000, seed=6), "lsmkv", "pushdown", cfg)
    u = run(WorkloadSpec("ycsb_c", "uniform", 5000, 3000, seed=6), "lsmkv", "pushdown", cfg)
    assert z.cache_hit_rate > u.cache_hit_rate


def test_bpfkv_run():
    spec = WorkloadSpec("uniform_read", n_keys=3000, n_ops=500, seed=1)
    cfg = CacheConfig(depth=4)
    p = run(spec, "bpfkv", "pushdown", cfg)
    b = run(spec, "bpfkv", "baseline", cfg)
    assert p.results_digest == b.results_digest
    assert (p.round_trips, b.round_trips) == (500, 2000)
    assert p.device_reads == b.device_reads == 2000


def test_sweep_bytes_between_extremes():
    spec = WorkloadSpec("ycsb_c", n_keys=4000, n_ops=3000, seed=7)
    rates = [0.0, 0.01, 0.1, 1.0]
    out = sweep_sampling(spec, rates, CacheConfig(cache_bytes=128 << 10))
    per_op = [(m.bytes_sent + m.bytes_received) / m.n_ops for m in out]
    worst = max(per_op[0], per_op[-1])
    assert all(x <= worst for x in per_op[1:-1])
    assert out[0].sampled_count == 0 and out[-1].sampled_count > 0
    assert len({m.results_digest for m in out}) == 1


def test_rate_zero_hit_rate_decays_on_skew():
    with LocalCluster(capacity_blocks=1 << 16) as c:
        db = LsmStore(c.client, LsmOptions(cache_bytes=1 << 20, sampling_rate=0.0, seed=1,
                                           memtable_bytes=8192, base_level_bytes=32768,
                                           target_file_bytes=8192))
        spec = WorkloadSpec("ycsb_a", n_keys=3000, n_ops=12000, seed=2)
        for i in range(spec.n_keys):
            db.put(lsm_key(i), make_value(i, 0, 50))
        db.flush()
        # warm the cache through the ordinary read path
        for i in range(spec.n_keys):
            db.get(lsm_key(i), "baseline")
        windows = []
        gen = 0
        for n, op in enumerate(generate(spec)):
            if op.kind == "read":
                db.get(lsm_key(op.key))
            else:
                gen += 1
                db.put(lsm_key(op.key), make_value(op.key, gen, 50))
            if n % 3000 == 0:
                db.cache.hits = db.cache.misses = 0
            if n % 3000 == 2999:
                windows.append(db.cache.hit_rate)
        assert windows[0] > windows[-1]
        assert all(b <= a + 0.02 for a, b in zip(windows, windows[1:]))


def test_trace_replay(tmp_path):
    p = tmp_path / "trace.csv"
    p.write_text("op,key,value_size\nupdate,5,20\nread,5,\ninsert,100,8\nread,100\nread,7,0\n")
    ops = load_trace(p)
    assert [o.kind for o in ops] == ["update", "read", "insert", "read", "read"]
    spec = WorkloadSpec("ycsb_a", n_keys=50, n_ops=0, seed=1)
    a = run(spec, "lsmkv", "pushdown", ops=ops)
    b = run(spec, "lsmkv", "baseline", ops=ops)
    assert a.n_ops == 5 and a.results_digest == b.results_digest
    bad = tmp_path / "bad.csv"
    bad.write_text("scan,1,0\n")
    with pytest.raises(ValueError):
        load_trace(bad)


def test_workers_share_one_store():
    spec = WorkloadSpec("ycsb_c", n_keys=2000, n_ops=2000, seed=3)
    one = run(spec, "lsmkv", "pushdown", CacheConfig(sampling_rate=0.0))
    four = run(spec, "lsmkv", "pushdown", CacheConfig(sampling_rate=0.0), workers=4)
    assert one.results_digest == four.results_digest


def test_metrics_report_is_json():
    m = Metrics("lsmkv", "pushdown", "ycsb_c", "zipfian", 1, 1, 0)
    assert set(json.loads(m.to_json())) == REPORT_FIELDS
    assert "round_trips" in m.table()
