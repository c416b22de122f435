import pytest

from storepush.bpfkv import BpfKV
from storepush.cluster import LocalCluster
from storepush.extent_store import OutOfRange
from storepush.functions import SST_CHAIN, Done, Resubmit
from storepush.host import Outcome, RemoteReadError, open_all
from storepush.lsm import LsmOptions, LsmStore
from storepush.wire import Status

BS = 512
ECHO = 200


class Echo:
    """Copies the first 8 bytes of each file in turn into the scratch."""

    def step(self, block, scratch, budget=None):
        i = scratch[0]
        scratch[1 + 8 * i:9 + 8 * i] = block[:8]
        scratch[0] = i + 1
        if i + 1 < scratch[-1]:
            return Resubmit(i + 1, 0, BS)
        return Done(len(scratch))


def make(n_files=3, **kw):
    c = LocalCluster(capacity_blocks=4096, **kw)
    c.target.register_function(ECHO, Echo())
    files = []
    for i in range(n_files):
        f = c.store.create_file(f"f{i}")
        c.store.append(f, bytes([i + 1]) * BS)
        files.append(f)
    c.sync()
    return c, open_all(c.client, files)


def echo_scratch(n):
    s = bytearray(64)
    s[-1] = n
    return s


def test_pre_submit_check_versions():
    c = LocalCluster(capacity_blocks=256)
    a, b = c.store.create_file("a"), c.store.create_file("b")
    for _ in range(4):
        c.store.append(a, bytes(BS))
    for _ in range(8):
        c.store.append(b, bytes(BS))
    c.sync()
    ha, hb = c.client.open(a), c.client.open(b)
    assert c.client.pre_submit_check([ha, hb]) == (5, 9)
    d = c.store.create_file("d")
    for _ in range(8):
        c.store.append(d, bytes(BS))
    c.syncer.queue.take_all()
    hd = c.client.open(d)
    assert c.client.pre_submit_check([ha, hd]) is None  # never synced
    c.syncer.sent.update(d, 8)
    assert c.client.pre_submit_check([ha, hd]) is None  # (5, 9) vs (5, 8)
    c.close()


def test_happy_path_one_round_trip():
    c, hs = make()
    res = c.client.read_pushdown(hs, 0, BS, ECHO, echo_scratch(3))
    assert res.outcome is Outcome.OK and res.stats.round_trips == 1
    assert res.stats.device_reads == 3 and res.stats.resubmissions == 2
    assert [res.scratch[1 + 8 * i] for i in range(3)] == [1, 2, 3]
    c.close()


def test_pre_check_abort_sends_nothing():
    c, hs = make()
    c.store.truncate_and_remap(hs[1].inode_id)
    c.transport.reset_counters()
    s = echo_scratch(3)
    res = c.client.read_pushdown(hs, 0, BS, ECHO, s)
    assert res.outcome is Outcome.ABORTED and res.reason == "pre_check"
    assert c.transport.bytes_sent == 0 and c.transport.round_trips == 0
    # the abort triggers a drain, so a retry goes through
    assert c.client.read_pushdown(hs, 0, BS, ECHO, echo_scratch(3)).ok
    c.close()


@pytest.mark.parametrize("victim,expect", [(1, Outcome.ABORTED), (None, Outcome.OK)])
def test_post_check_mid_flight(victim, expect):
    c, hs = make()
    other = c.store.create_file("unrelated")

    def after(frame, resp):
        if victim is None:
            c.store.append(other, bytes(BS))
        else:
            c.store.truncate_and_remap(hs[victim].inode_id)

    c.transport.after = after
    s = echo_scratch(3)
    res = c.client.read_pushdown(hs, 0, BS, ECHO, s)
    assert res.outcome is expect
    if victim is not None:
        assert res.reason == "post_check" and s == bytearray(64)
        assert c.client.counters.post_check_aborts == 1
    c.close()


def test_target_side_mismatch_aborts_and_wipes():
    c, hs = make()
    # host and acked table agree, but the replica went away (target restart)
    c.replicas.clear()
    s = echo_scratch(1)
    res = c.client.read_pushdown(hs[:1], 0, BS, ECHO, s)
    assert res.outcome is Outcome.ABORTED and res.reason == "target_mismatch"
    assert res.status == Status.VERSION_MISMATCH and s == bytearray(64)
    c.close()


def test_transport_failure_is_abort():
    c, hs = make()

    def boom(frame):
        raise ConnectionResetError("gone")

    c.transport.before = boom
    s = echo_scratch(1)
    res = c.client.read_pushdown(hs[:1], 0, BS, ECHO, s)
    assert res.outcome is Outcome.ABORTED and res.reason == "transport" and s == bytearray(64)
    c.close()


def test_argument_bounds():
    c, hs = make(1)
    with pytest.raises(ValueError):
        c.client.read_pushdown([], 0, BS, ECHO, bytearray(8))
    with pytest.raises(ValueError):
        c.client.read_pushdown(hs * 17, 0, BS, ECHO, bytearray(8))
    with pytest.raises(ValueError):
        c.client.read_pushdown(hs, 0, BS, ECHO, bytearray(65537))
    c.close()


def test_read_remote():
    c, hs = make(1)
    assert c.client.read_remote(hs[0], 0, BS) == bytes([1]) * BS
    with pytest.raises(OutOfRange):
        c.client.read_remote(hs[0], BS, BS)
    c.close()


def test_read_remote_retries_after_remap():
    c, hs = make(1)
    inode = hs[0].inode_id
    fired = []

    def before(frame):
        if not fired:
            fired.append(1)
            c.store.truncate_and_remap(inode)

    c.transport.before = before
    assert c.client.read_remote(hs[0], 0, BS) == bytes([1]) * BS
    assert c.client.counters.read_mismatches == 1 and c.client.counters.plain_reads == 2
    c.close()


def test_read_remote_gives_up_after_bounded_retries():
    c, hs = make(1)
    c.transport.before = lambda frame: c.store.truncate_and_remap(hs[0].inode_id)
    with pytest.raises(RemoteReadError):
        c.client.read_remote(hs[0], 0, BS)
    assert c.client.counters.plain_reads == 4
    c.close()


def test_fallback_depth7_costs_seven_round_trips():
    c = LocalCluster(capacity_blocks=8192)
    kv = BpfKV.build(c.client, "t", 20000, depth=7)
    c.transport.reset_counters()
    key = 2 * 777 + 1
    assert c.client.fallback_read_path(_Q(kv, key)) == kv._baseline_get(key)
    c.transport.reset_counters()
    c.client.fallback_read_path(_Q(kv, key))
    assert c.transport.round_trips == 7
    c.close()


class _Q:
    def __init__(self, kv, key):
        self.kv, self.key = kv, key

    def run_fallback(self, client):
        return self.kv._baseline_get(self.key)


def test_fallback_on_split_data_block():
    c = LocalCluster(capacity_blocks=1 << 14, fragment_prob=1.0, seed=3)
    db = LsmStore(c.client, LsmOptions(cache_bytes=0, sampling_rate=0.0))
    oracle = {}
    for i in range(400):
        k, v = b"k%04d" % i, b"v" * 50 + bytes([i % 256])
        db.put(k, v)
        oracle[k] = v
    db.flush()
    c.sync()
    for k, v in oracle.items():
        assert db.get(k) == v
    assert c.client.counters.function_fallbacks > 0
    assert db.stats.fallbacks == db.stats.function_fallbacks > 0
    st = c.target.stats()["functions"][str(SST_CHAIN)]
    assert st["fallbacks"] == c.client.counters.function_fallbacks
    c.close()
