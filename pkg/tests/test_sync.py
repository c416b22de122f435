import logging
import struct
import threading
import time

import pytest

from storepush.cluster import LocalCluster
from storepush.extent_store import BlockDevice, Extent, ExtentStore
from storepush.sync import (ACK_MAGIC, SYNC_MAGIC, ChangeQueue, LoopbackSyncChannel,
                            MalformedRecord, MetadataSyncer, ReplicaStore, SentVersionTable,
                            SyncRecord, TcpSyncChannel, decode_ack, decode_record, encode_ack,
                            encode_record)
from storepush.target import TargetDaemon, TargetServer

BS = 512


class CountingChannel:
    def __init__(self, replicas, hook=None):
        self.inner = LoopbackSyncChannel(replicas)
        self.sent = []
        self.hook = hook
        self.fail = False

    def send(self, payload):
        if self.fail:
            raise ConnectionError("link down")
        rec = decode_record(payload)
        self.sent.append((rec.inode_id, rec.version))
        if self.hook:
            self.hook(rec)
        return self.inner.send(payload)


def setup(hook=None):
    store = ExtentStore(BlockDevice(1024, BS))
    replicas = ReplicaStore(BS)
    ch = CountingChannel(replicas, hook)
    return store, replicas, ch, MetadataSyncer(store, ch)


def test_record_wire_format():
    rec = SyncRecord(3, 7, (Extent(0, 100, 2), Extent(1024, 9, 1)), 1536)
    raw = encode_record(rec)
    assert raw[:4] == struct.pack("<I", SYNC_MAGIC)
    assert struct.unpack_from("<IQQQI", raw) == (SYNC_MAGIC, 3, 7, 1536, 2)
    assert struct.unpack_from("<QQI", raw, 32) == (0, 100, 2)
    assert len(raw) == 32 + 2 * 20
    assert decode_record(raw) == rec
    ack = encode_ack(3, 7)
    assert ack == struct.pack("<IQQ", ACK_MAGIC, 3, 7)
    assert decode_ack(ack) == (3, 7)
    with pytest.raises(MalformedRecord):
        decode_record(b"\0" * 31)
    with pytest.raises(MalformedRecord):
        decode_record(raw[:-1])
    with pytest.raises(MalformedRecord):
        decode_ack(struct.pack("<IQQ", SYNC_MAGIC, 3, 7))


def test_queue_coalesces():
    q = ChangeQueue()
    q.put(4)
    q.put(4)
    assert len(q) == 1
    for i in range(1000):
        q.put(i % 10)
    assert len(q) <= 10
    assert q.take_all() == [4] + [i for i in range(10) if i != 4]
    assert len(q) == 0


def test_notify_unknown_inode_is_skipped(caplog):
    store, replicas, ch, syncer = setup()
    syncer.notify_change(42)
    with caplog.at_level(logging.DEBUG):
        assert syncer.drain_once() == 0
    assert "unknown inode 42" in caplog.text
    assert ch.sent == []


def test_drain_sends_only_newer_versions():
    store, replicas, ch, syncer = setup()
    a = store.create_file("a")
    for _ in range(4):
        store.append(a, bytes(BS))
    assert store.version(a) == 5
    assert syncer.drain_once() == 1
    assert syncer.sent.get(a) == 5 and replicas.version(a) == 5
    syncer.notify_change(a)
    assert syncer.drain_once() == 0
    store.append(a, bytes(BS))
    store.append(a, bytes(BS))
    assert syncer.drain_once() == 1
    assert ch.sent[-1] == (a, 7) and syncer.sent.get(a) == 7


def test_mutation_between_snapshot_and_ack_stays_queued():
    state = {}

    def hook(rec):
        if not state.get("done"):
            state["done"] = True
            store.append(rec.inode_id, bytes(BS))

    store, replicas, ch, syncer = setup(hook)
    a = store.create_file("a")
    store.append(a, bytes(BS))
    syncer.drain_once()
    assert syncer.sent.get(a) == 2 and store.version(a) == 3
    assert a in syncer.queue
    syncer.drain_once()
    assert syncer.sent.get(a) == 3 == replicas.version(a)


def test_connection_failure_keeps_queue_and_table():
    store, replicas, ch, syncer = setup()
    a, b = store.create_file("a"), store.create_file("b")
    ch.fail = True
    assert syncer.drain_once() == 0
    assert syncer.sent.get(a) is None and a in syncer.queue and b in syncer.queue
    ch.fail = False
    assert syncer.drain_once() == 2
    assert syncer.is_synced(a) and syncer.is_synced(b)


def test_apply_is_monotonic_and_validated():
    r = ReplicaStore(BS)
    v7 = SyncRecord(1, 7, (Extent(0, 10, 1),), BS)
    v5 = SyncRecord(1, 5, (Extent(0, 20, 1),), BS)
    assert decode_ack(r.handle(encode_record(v5))) == (1, 5)
    assert decode_ack(r.handle(encode_record(v7))) == (1, 7)
    assert decode_ack(r.handle(encode_record(v5))) == (1, 7)
    assert r.get(1).extents[0].device_block == 10
    bad = SyncRecord(1, 9, (Extent(BS, 10, 1),), BS)
    with pytest.raises(MalformedRecord):
        r.apply(bad)
    assert r.version(1) == 7


def test_sent_table_only_increases():
    t = SentVersionTable()
    t.update(1, 5)
    t.update(1, 3)
    assert t.get(1) == 5
    assert t.get(2) is None


def test_replica_reads_are_atomic_under_apply():
    r = ReplicaStore(BS)
    stop = threading.Event()
    bad = []

    def writer():
        v = 1
        while not stop.is_set():
            v += 1
            n = v % 5 + 1
            r.apply(SyncRecord(1, v, (Extent(0, v, n),), n * BS))

    def reader():
        while not stop.is_set():
            m = r.get(1)
            if m is not None and (m.extents[0].device_block != m.version
                                  or m.file_length != m.extents[0].length_blocks * BS):
                bad.append(m)

    ts = [threading.Thread(target=writer), threading.Thread(target=reader)]
    for t in ts:
        t.start()
    time.sleep(0.3)
    stop.set()
    for t in ts:
        t.join()
    assert not bad


def test_background_sync_converges():
    with LocalCluster(capacity_blocks=4096, background_sync=True) as c:
        files = [c.store.create_file(f"f{i}") for i in range(10)]
        for i in range(200):
            c.store.append(files[i % 10], bytes(BS))
            if i % 7 == 0:
                c.store.truncate_and_remap(files[i % 3])
        deadline = time.monotonic() + 5
        while not all(c.syncer.is_synced(f) for f in files):
            assert time.monotonic() < deadline
            time.sleep(0.005)
        for f in files:
            assert c.replicas.version(f) == c.store.version(f)
            assert c.syncer.sent.get(f) <= c.store.version(f)


class StalledChannel:
    def __init__(self, inner):
        self.inner = inner
        self.gate = threading.Event()

    def send(self, payload):
        self.gate.wait()
        return self.inner.send(payload)


def test_data_path_does_not_block_on_stalled_sync():
    c = LocalCluster(capacity_blocks=4096)
    a = c.store.create_file("a")
    c.store.append(a, bytes(range(256)) * 4)
    c.sync()
    stalled = StalledChannel(c.sync_channel)
    c.syncer.channel = stalled
    c.syncer.start()
    c.client.sync_wait = 0.05
    try:
        c.store.truncate_and_remap(a)
        time.sleep(0.01)
        h = c.client.open(a)
        done = []

        def go():
            from storepush.functions import BTREE_LOOKUP
            res = c.client.read_pushdown([h], 0, BS, BTREE_LOOKUP, bytearray(64))
            done.append(res.outcome.value)
            try:
                c.client.read_remote(h, 0, BS)
                done.append("read")
            except Exception as e:
                done.append(type(e).__name__)

        t = threading.Thread(target=go)
        t.start()
        t.join(5)
        assert not t.is_alive()
        assert done == ["aborted", "RemoteReadError"]
    finally:
        stalled.gate.set()
        c.close()


def test_tcp_sync_channel_roundtrip():
    target = TargetServer(BlockDevice(64, BS), ReplicaStore(BS))
    d = TargetDaemon(target, ("127.0.0.1", 0), ("127.0.0.1", 0))
    d.start()
    try:
        ch = TcpSyncChannel(d.sync_address)
        store = ExtentStore(BlockDevice(64, BS))
        syncer = MetadataSyncer(store, ch)
        a = store.create_file("a")
        store.append(a, bytes(2 * BS))
        assert syncer.drain_once() == 1
        assert target.replicas.version(a) == 2 == syncer.sent.get(a)
        ch.close()
    finally:
        d.shutdown()
