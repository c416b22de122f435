"""Host-side driver: remote reads and pushdown reads with version checks.

A pushdown read is checked twice against the extent store. Before
submission every file's current version must equal the version the target
acknowledged; the versions are recorded in the request. After completion
every file's current version must still equal the recorded one, otherwise
the result may have been computed through a mapping that was remapped in
flight, so the request is aborted and the caller's scratch is zeroed.
"""

from __future__ import annotations

import enum
import itertools
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

from . import wire
from .extent_store import ExtentStore, InodeRef, OutOfRange, UnknownInode
from .sync import MetadataSyncer
from .wire import MAX_FDS, MAX_SCRATCH, PushdownCapsule, ReadCapsule, Status


class RemoteReadError(Exception):
    def __init__(self, msg: str, status: Status | None = None):
        super().__init__(msg)
        self.status = status


class Outcome(enum.Enum):
    OK = "ok"
    FALLBACK = "fallback"
    ABORTED = "aborted"


@dataclass
class RequestStats:
    round_trips: int = 0
    device_reads: int = 0
    resubmissions: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0


@dataclass
class PushdownResult:
    outcome: Outcome
    scratch: bytearray
    result_len: int = 0
    reason: str | None = None
    status: Status | None = None
    versions: tuple[int, ...] = ()
    stats: RequestStats = field(default_factory=RequestStats)

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.OK

    @property
    def result(self) -> bytes:
        return bytes(self.scratch[:self.result_len])


class FileHandle:
    """An open file: inode id plus a held reference that pins its blocks."""

    def __init__(self, ref: InodeRef):
        self.ref = ref
        self.inode_id = ref.inode_id

    def close(self) -> None:
        self.ref.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        return f"FileHandle(inode={self.inode_id})"


class FallbackQuery(Protocol):
    def run_fallback(self, client: HostClient) -> Any: ...


class ClientCounters:
    FIELDS = ("round_trips", "bytes_sent", "bytes_received", "device_reads", "resubmissions",
              "pushdowns", "plain_reads", "pre_check_aborts", "post_check_aborts",
              "target_mismatches", "read_mismatches", "function_fallbacks", "errors", "fallbacks")

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self) -> None:
        for f in self.FIELDS:
            setattr(self, f, 0)

    def add(self, **kw) -> None:
        with self._lock:
            for k, v in kw.items():
                setattr(self, k, getattr(self, k) + v)

    @property
    def mismatches(self) -> int:
        return (self.pre_check_aborts + self.post_check_aborts + self.target_mismatches
                + self.read_mismatches)

    def as_dict(self) -> dict[str, int]:
        d = {f: getattr(self, f) for f in self.FIELDS}
        d["mismatches"] = self.mismatches
        return d


class HostClient:
    def __init__(self, store: ExtentStore, syncer: MetadataSyncer, transport,
                 max_read_retries: int = 3, sync_wait: float = 0.5):
        self.store = store
        self.syncer = syncer
        self.transport = transport
        self.max_read_retries = max_read_retries
        self.sync_wait = sync_wait
        self.counters = ClientCounters()
        self._ids = itertools.count(1)

    def open(self, inode_id: int) -> FileHandle:
        return FileHandle(self.store.open(inode_id))

    # -- version checks ---------------------------------------------------------

    def pre_submit_check(self, files: Sequence[FileHandle]) -> tuple[int, ...] | None:
        """Versions to stamp on the request, or ``None`` to abort it."""
        versions = []
        for fh in files:
            cur = self.store.version(fh.inode_id)
            if cur != self.syncer.sent.get(fh.inode_id):
                return None
            versions.append(cur)
        return tuple(versions)

    def post_complete_check(self, files: Sequence[FileHandle], used: Sequence[int]) -> bool:
        return all(self.store.version(fh.inode_id) == v for fh, v in zip(files, used))

    # -- pushdown ------------------------------------------------------------------

    def read_pushdown(self, files: Sequence[FileHandle], first_offset: int, first_length: int,
                      function_id: int, scratch: bytearray, first_fd: int = 0) -> PushdownResult:
        """Run ``function_id`` at the target starting with one read of
        ``files[first_fd]``.

        ``scratch`` is the caller's buffer. On success it holds the
        function's result in its first ``result_len`` bytes; after any
        abort that happened once the request was on the wire it is all
        zeros.
        """
        if not 1 <= len(files) <= MAX_FDS:
            raise ValueError(f"need 1..{MAX_FDS} files, got {len(files)}")
        if len(scratch) > MAX_SCRATCH:
            raise ValueError("scratch larger than MAX_SCRATCH")
        stats = RequestStats()
        versions = self.pre_submit_check(files)
        if versions is None:
            self.counters.add(pre_check_aborts=1)
            self.syncer.kick()
            return PushdownResult(Outcome.ABORTED, scratch, reason="pre_check", stats=stats)

        rid = next(self._ids)
        cap = PushdownCapsule(rid, function_id,
                              tuple((fh.inode_id, v) for fh, v in zip(files, versions)),
                              first_fd, first_offset, first_length, bytes(scratch))
        frame = wire.encode(cap)
        try:
            raw = self.transport.roundtrip(frame)
            resp, _ = wire.decode(raw)
        except (OSError, wire.DecodeError):
            self._wipe(scratch)
            self.counters.add(errors=1)
            return PushdownResult(Outcome.ABORTED, scratch, reason="transport", versions=versions,
                                  stats=stats)
        stats.round_trips = 1
        stats.bytes_sent = len(frame)
        stats.bytes_received = len(raw)
        stats.device_reads = resp.device_reads
        stats.resubmissions = resp.resubmission_count
        self.counters.add(round_trips=1, bytes_sent=len(frame), bytes_received=len(raw),
                          device_reads=resp.device_reads, resubmissions=resp.resubmission_count,
                          pushdowns=1)

        def abort(reason, **count):
            self._wipe(scratch)
            self.counters.add(**count)
            return PushdownResult(Outcome.ABORTED, scratch, reason=reason, status=resp.status,
                                  versions=versions, stats=stats)

        if not isinstance(resp, wire.PushdownResponse) or resp.request_id != rid:
            return abort("transport", errors=1)
        if not self.post_complete_check(files, versions):
            return abort("post_check", post_check_aborts=1)
        if resp.status == Status.OK:
            n = len(resp.scratch)
            scratch[:n] = resp.scratch
            scratch[n:] = bytes(len(scratch) - n)
            return PushdownResult(Outcome.OK, scratch, n, status=resp.status, versions=versions,
                                  stats=stats)
        if resp.status == Status.VERSION_MISMATCH:
            self.syncer.kick()
            return abort("target_mismatch", target_mismatches=1)
        if resp.status == Status.FUNCTION_FALLBACK:
            self._wipe(scratch)
            self.counters.add(function_fallbacks=1)
            return PushdownResult(Outcome.FALLBACK, scratch, reason="function_fallback",
                                  status=resp.status, versions=versions, stats=stats)
        return abort(resp.status.name.lower(), errors=1)

    @staticmethod
    def _wipe(scratch: bytearray) -> None:
        scratch[:] = bytes(len(scratch))

    # -- plain reads ---------------------------------------------------------------

    def _await_sync(self, inode_id: int, version: int) -> None:
        if self.syncer.sent.get(inode_id) == version:
            return
        self.syncer.kick()
        deadline = time.monotonic() + self.sync_wait
        while self.syncer.sent.get(inode_id) != self.store.version(inode_id):
            if time.monotonic() > deadline:
                return
            time.sleep(0.0002)

    def await_synced(self, files: Sequence[FileHandle]) -> None:
        """Kick the synchronizer and wait (bounded) until ``files`` are acked."""
        for fh in files:
            self._await_sync(fh.inode_id, self.store.version(fh.inode_id))

    def read_remote(self, handle: FileHandle, offset: int, length: int) -> bytes:
        """One round trip per attempt; retried on version trouble."""
        inode = handle.inode_id
        for _ in range(self.max_read_retries + 1):
            emap = self.store.snapshot(inode)
            if offset < 0 or length <= 0 or offset + length > emap.file_length:
                raise OutOfRange(f"read [{offset}, {offset + length}) of {emap.file_length}")
            self._await_sync(inode, emap.version)
            rid = next(self._ids)
            frame = wire.encode(ReadCapsule(rid, inode, emap.version, offset, length))
            raw = self.transport.roundtrip(frame)
            resp, _ = wire.decode(raw)
            self.counters.add(round_trips=1, bytes_sent=len(frame), bytes_received=len(raw),
                              device_reads=1 if resp.status == Status.OK else 0, plain_reads=1)
            if resp.request_id != rid:
                raise RemoteReadError("response id mismatch")
            if self.store.version(inode) != emap.version:
                self.counters.add(read_mismatches=1)
                continue
            if resp.status == Status.OK:
                return resp.data
            if resp.status == Status.VERSION_MISMATCH:
                self.counters.add(read_mismatches=1)
                self.syncer.kick()
                continue
            raise RemoteReadError(f"remote read failed: {resp.status.name}", resp.status)
        raise RemoteReadError("version mismatch persisted after retries", Status.VERSION_MISMATCH)

    def fallback_read_path(self, query: FallbackQuery):
        """Answer ``query`` block by block over plain remote reads."""
        self.counters.add(fallbacks=1)
        return query.run_fallback(self)


def open_all(client: HostClient, inodes: Sequence[int]) -> list[FileHandle]:
    handles = []
    try:
        for i in inodes:
            handles.append(client.open(i))
    except UnknownInode:
        for h in handles:
            h.close()
        raise
    return handles
