"""Out-of-band replication of per-inode extent maps from host to target.

Host side: :class:`MetadataSyncer` coalesces change notifications into a
:class:`ChangeQueue`, ships full :class:`SyncRecord` snapshots over its own
channel and records acknowledged versions in a :class:`SentVersionTable`.
That table is what the pre-submission check reads as the version the
target holds.

Target side: :class:`ReplicaStore` applies records monotonically and hands
out immutable snapshots to the pushdown executor.

Wire format (little-endian)::

    record: u32 0x53594E43, u64 inode, u64 version, u64 file_length, u32 extent_count,
            extent_count x (u64 file_offset, u64 device_block, u32 length_blocks)
    ack:    u32 0x53594E41, u64 inode, u64 version
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass

from .extent_store import DEFAULT_BLOCK_SIZE, Extent, ExtentMap, ExtentStore, UnknownInode

log = logging.getLogger(__name__)

SYNC_MAGIC = 0x53594E43
ACK_MAGIC = 0x53594E41
MAX_EXTENTS = 1 << 20

_REC_HEAD = struct.Struct("<IQQQI")
_REC_EXT = struct.Struct("<QQI")
_ACK = struct.Struct("<IQQ")


class SyncError(Exception):
    pass


class MalformedRecord(SyncError, ValueError):
    pass


@dataclass(frozen=True)
class SyncRecord:
    inode_id: int
    version: int
    extents: tuple[Extent, ...]
    file_length: int

    @classmethod
    def from_map(cls, emap: ExtentMap) -> SyncRecord:
        return cls(emap.inode_id, emap.version, emap.extents, emap.file_length)

    def to_map(self, block_size: int) -> ExtentMap:
        return ExtentMap(self.inode_id, self.version, self.extents, self.file_length, block_size)


def encode_record(rec: SyncRecord) -> bytes:
    parts = [_REC_HEAD.pack(SYNC_MAGIC, rec.inode_id, rec.version, rec.file_length,
                            len(rec.extents))]
    parts += [_REC_EXT.pack(e.file_offset, e.device_block, e.length_blocks) for e in rec.extents]
    return b"".join(parts)


def record_size(head: bytes) -> int:
    """Full record length given its fixed-size head (for stream readers)."""
    magic, _, _, _, count = _REC_HEAD.unpack_from(head, 0)
    if magic != SYNC_MAGIC:
        raise MalformedRecord(f"bad magic {magic:#x}")
    if count > MAX_EXTENTS:
        raise MalformedRecord(f"extent count {count} too large")
    return _REC_HEAD.size + count * _REC_EXT.size


def decode_record(buf: bytes) -> SyncRecord:
    if len(buf) < _REC_HEAD.size:
        raise MalformedRecord("short record")
    size = record_size(buf)
    if len(buf) != size:
        raise MalformedRecord(f"record length {len(buf)} != {size}")
    _, inode, version, flen, count = _REC_HEAD.unpack_from(buf, 0)
    exts = tuple(Extent(*_REC_EXT.unpack_from(buf, _REC_HEAD.size + i * _REC_EXT.size))
                 for i in range(count))
    return SyncRecord(inode, version, exts, flen)


def encode_ack(inode_id: int, version: int) -> bytes:
    return _ACK.pack(ACK_MAGIC, inode_id, version)


def decode_ack(buf: bytes) -> tuple[int, int]:
    if len(buf) != _ACK.size:
        raise MalformedRecord("bad ack length")
    magic, inode, version = _ACK.unpack(buf)
    if magic != ACK_MAGIC:
        raise MalformedRecord(f"bad ack magic {magic:#x}")
    return inode, version


ACK_SIZE = _ACK.size
RECORD_HEAD_SIZE = _REC_HEAD.size


def _validate(rec: SyncRecord, block_size: int) -> None:
    pos = 0
    for e in rec.extents:
        if e.length_blocks < 1 or e.file_offset != pos:
            raise MalformedRecord("extents not contiguous from offset 0")
        pos += e.length_blocks * block_size
    if rec.file_length > pos or (rec.file_length == 0) != (pos == 0):
        raise MalformedRecord("file_length inconsistent with extents")
    if rec.version < 1:
        raise MalformedRecord("version must be >= 1")


class ReplicaStore:
    """Target-side replicas. Readers get whole snapshots, never a mix."""

    def __init__(self, block_size: int = DEFAULT_BLOCK_SIZE):
        self.block_size = block_size
        self._maps: dict[int, ExtentMap] = {}
        self._lock = threading.Lock()
        self.applied = 0

    def get(self, inode_id: int) -> ExtentMap | None:
        return self._maps.get(inode_id)

    def version(self, inode_id: int) -> int:
        m = self._maps.get(inode_id)
        return 0 if m is None else m.version

    def apply(self, rec: SyncRecord) -> int:
        """Install ``rec`` if newer than the replica; return the held version."""
        _validate(rec, self.block_size)
        with self._lock:
            cur = self._maps.get(rec.inode_id)
            if cur is None or rec.version > cur.version:
                self._maps[rec.inode_id] = rec.to_map(self.block_size)
                self.applied += 1
                return rec.version
            return cur.version

    def handle(self, buf: bytes) -> bytes:
        """Apply one encoded record and return the encoded ack."""
        rec = decode_record(buf)
        return encode_ack(rec.inode_id, self.apply(rec))

    def clear(self) -> None:
        """Forget everything, as after a target restart."""
        with self._lock:
            self._maps = {}


class ChangeQueue:
    """Ordered set of inodes awaiting sync; repeated notifies coalesce."""

    def __init__(self):
        self._items: OrderedDict[int, None] = OrderedDict()
        self._cond = threading.Condition()

    def put(self, inode_id: int) -> None:
        with self._cond:
            self._items[inode_id] = None
            self._cond.notify()

    def take_all(self) -> list[int]:
        with self._cond:
            items = list(self._items)
            self._items.clear()
            return items

    def wake(self) -> None:
        with self._cond:
            self._cond.notify_all()

    def wait(self, timeout: float) -> None:
        with self._cond:
            if not self._items:
                self._cond.wait(timeout)

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, inode_id: int) -> bool:
        return inode_id in self._items


class SentVersionTable:
    def __init__(self):
        self._v: dict[int, int] = {}
        self._lock = threading.Lock()

    def get(self, inode_id: int) -> int | None:
        return self._v.get(inode_id)

    def update(self, inode_id: int, version: int) -> None:
        with self._lock:
            if version > self._v.get(inode_id, 0):
                self._v[inode_id] = version

    def reset(self) -> None:
        with self._lock:
            self._v = {}

    def items(self):
        return list(self._v.items())


class LoopbackSyncChannel:
    """In-process channel straight into a :class:`ReplicaStore`."""

    def __init__(self, replicas: ReplicaStore):
        self.replicas = replicas
        self.messages = 0

    def send(self, payload: bytes) -> bytes:
        self.messages += 1
        return self.replicas.handle(payload)

    def close(self) -> None:
        pass


class TcpSyncChannel:
    def __init__(self, addr: tuple[str, int], timeout: float = 5.0):
        self.addr = addr
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self.messages = 0

    def _connect(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection(self.addr, timeout=self.timeout)
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return self._sock

    def send(self, payload: bytes) -> bytes:
        sock = self._connect()
        try:
            sock.sendall(payload)
            ack = _recv_exact(sock, ACK_SIZE)
        except OSError:
            self.close()
            raise
        self.messages += 1
        return ack

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return bytes(buf)


class MetadataSyncer:
    """Host half of the synchronizer.

    ``notify_change`` is cheap and callable from any thread; the extent
    store's change listener is wired to it on construction. Draining
    happens either explicitly (``drain_once``) or in a background thread
    started with ``start()``.
    """

    def __init__(self, store: ExtentStore, channel, poll_interval: float = 0.001):
        self.store = store
        self.channel = channel
        self.poll_interval = poll_interval
        self.queue = ChangeQueue()
        self.sent = SentVersionTable()
        self._send_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.records_sent = 0
        self.failures = 0
        store.add_listener(lambda inode, _version: self.notify_change(inode))

    def notify_change(self, inode_id: int) -> None:
        self.queue.put(inode_id)

    def drain_once(self) -> int:
        """Ship every queued inode whose version moved past the acked one."""
        with self._send_lock:
            pending = self.queue.take_all()
            sent = 0
            for i, inode in enumerate(pending):
                try:
                    emap = self.store.snapshot(inode)
                except UnknownInode:
                    log.debug("skipping sync of unknown inode %d", inode)
                    continue
                acked = self.sent.get(inode)
                if acked is not None and emap.version <= acked:
                    continue
                try:
                    ack = self.channel.send(encode_record(SyncRecord.from_map(emap)))
                    ack_inode, ack_version = decode_ack(ack)
                except (OSError, SyncError) as e:
                    self.failures += 1
                    log.warning("metadata sync failed: %s", e)
                    for rest in pending[i:]:
                        self.queue.put(rest)
                    break
                if ack_inode == inode and ack_version <= emap.version:
                    self.sent.update(inode, ack_version)
                sent += 1
            self.records_sent += sent
            return sent

    def sync_all(self) -> int:
        for inode in self.store.inodes():
            self.queue.put(inode)
        return self.drain_once()

    def is_synced(self, inode_id: int) -> bool:
        return self.sent.get(inode_id) == self.store.version(inode_id)

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="metadata-sync", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.is_set():
            self.queue.wait(self.poll_interval)
            if self._stop.is_set():
                break
            self.drain_once()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stop.set()
        self.queue.wake()
        self._thread.join()
        self._thread = None

    @property
    def running(self) -> bool:
        return self._thread is not None

    def kick(self) -> None:
        """Ask for a prompt drain without waiting on the sync channel."""
        if self._thread is not None:
            self.queue.wake()
        else:
            self.drain_once()
