"""Target daemon: plain reads and pushdown execution over synced replicas."""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from collections import defaultdict
from dataclasses import dataclass

from . import wire
from .extent_store import BlockDevice, ExtentMap, OutOfRange
from .functions import (FALLBACK_SPLIT_READ, BudgetExceeded, Done, Fallback, PushdownFunction,
                        Resubmit, StepBudget, default_functions)
from .sync import RECORD_HEAD_SIZE, MalformedRecord, ReplicaStore, record_size
from .wire import PushdownCapsule, PushdownResponse, ReadCapsule, ReadResponse, Status

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExecutionLimits:
    max_resubmissions: int = 64
    max_read_length: int = 1 << 20
    max_steps_per_call: int = 1 << 20


class FunctionRegistry:
    def __init__(self):
        self._fns: dict[int, PushdownFunction] = {}
        self._lock = threading.Lock()

    def register(self, function_id: int, fn: PushdownFunction) -> None:
        with self._lock:
            if function_id in self._fns:
                raise ValueError(f"function {function_id} already registered")
            self._fns[function_id] = fn

    def get(self, function_id: int) -> PushdownFunction | None:
        return self._fns.get(function_id)

    def __contains__(self, function_id: int) -> bool:
        return function_id in self._fns


class SplitRead(Exception):
    """A pushdown read does not map to one contiguous device run."""


class TargetServer:
    def __init__(self, device: BlockDevice, replicas: ReplicaStore | None = None,
                 limits: ExecutionLimits | None = None, register_defaults: bool = True):
        self.device = device
        self.replicas = replicas if replicas is not None else ReplicaStore(device.block_size)
        self.limits = limits or ExecutionLimits()
        self.registry = FunctionRegistry()
        if register_defaults:
            for fid, fn in default_functions().items():
                self.registry.register(fid, fn)
        self._stats_lock = threading.Lock()
        self._fn_stats: dict[int, dict[str, int]] = defaultdict(
            lambda: {"executions": 0, "resubmissions": 0, "device_reads": 0, "mismatches": 0,
                     "fallbacks": 0, "errors": 0})
        self.reads_served = 0
        self.read_mismatches = 0

    def register_function(self, function_id: int, fn: PushdownFunction) -> None:
        self.registry.register(function_id, fn)

    # -- plain reads ---------------------------------------------------------

    def serve_read(self, cap: ReadCapsule) -> ReadResponse:
        emap = self.replicas.get(cap.inode_id)
        if emap is None or emap.version != cap.expected_version:
            with self._stats_lock:
                self.read_mismatches += 1
            return ReadResponse(cap.request_id, Status.VERSION_MISMATCH)
        if cap.length > self.limits.max_read_length:
            return ReadResponse(cap.request_id, Status.LIMIT_EXCEEDED)
        try:
            data = self._read(emap, cap.offset, cap.length)
        except (OutOfRange, ValueError):
            return ReadResponse(cap.request_id, Status.IO_ERROR)
        with self._stats_lock:
            self.reads_served += 1
        return ReadResponse(cap.request_id, Status.OK, data)

    def _read(self, emap: ExtentMap, offset: int, length: int, contiguous: bool = False) -> bytes:
        runs = emap.device_runs(offset, length)
        if contiguous and len(runs) > 1:
            raise SplitRead(f"{len(runs)} device runs")
        data = b"".join(self.device.read(b, n) for b, n in runs)
        skip = offset % emap.block_size
        return data[skip:skip + length]

    # -- pushdown ------------------------------------------------------------

    def execute_pushdown(self, cap: PushdownCapsule) -> PushdownResponse:
        fn = self.registry.get(cap.function_id)
        stats = self._fn_stats[cap.function_id]
        if fn is None:
            return self._finish(stats, PushdownResponse(cap.request_id, Status.FUNCTION_ERROR))
        # pin one snapshot per fd for the whole chain
        maps = []
        for inode, version in cap.fds:
            emap = self.replicas.get(inode)
            if emap is None or emap.version != version:
                return self._finish(stats, PushdownResponse(cap.request_id,
                                                             Status.VERSION_MISMATCH))
            maps.append(emap)

        limits = self.limits
        scratch = bytearray(cap.scratch)
        budget = StepBudget(limits.max_steps_per_call)
        fd, offset, length = cap.fd_index, cap.offset, cap.length
        reads = resubs = 0

        def fail(status):
            return self._finish(stats, PushdownResponse(cap.request_id, status, resubs, reads))

        while True:
            if not 0 <= fd < len(maps):
                return fail(Status.FUNCTION_ERROR)
            if length <= 0 or length > limits.max_read_length:
                return fail(Status.LIMIT_EXCEEDED)
            try:
                block = self._read(maps[fd], offset, length, contiguous=True)
            except SplitRead:
                return self._finish(stats, PushdownResponse(
                    cap.request_id, Status.FUNCTION_FALLBACK, resubs, reads, bytes(scratch)),
                    reason=FALLBACK_SPLIT_READ)
            except (OutOfRange, ValueError):
                return fail(Status.IO_ERROR)
            reads += 1
            try:
                out = fn.step(block, scratch, budget)
            except BudgetExceeded:
                return fail(Status.LIMIT_EXCEEDED)
            except Exception:
                log.exception("function %d faulted", cap.function_id)
                return fail(Status.FUNCTION_ERROR)
            if isinstance(out, Resubmit):
                if resubs >= limits.max_resubmissions:
                    return fail(Status.LIMIT_EXCEEDED)
                resubs += 1
                fd, offset, length = out.fd_index, out.offset, out.length
            elif isinstance(out, Done):
                if not 0 <= out.result_length <= len(scratch):
                    return fail(Status.FUNCTION_ERROR)
                return self._finish(stats, PushdownResponse(
                    cap.request_id, Status.OK, resubs, reads, bytes(scratch[:out.result_length])))
            elif isinstance(out, Fallback):
                return self._finish(stats, PushdownResponse(
                    cap.request_id, Status.FUNCTION_FALLBACK, resubs, reads, bytes(scratch)),
                    reason=out.reason)
            else:
                return fail(Status.FUNCTION_ERROR)

    def _finish(self, stats, resp: PushdownResponse, reason: int | None = None) -> PushdownResponse:
        with self._stats_lock:
            stats["executions"] += 1
            stats["resubmissions"] += resp.resubmission_count
            stats["device_reads"] += resp.device_reads
            if resp.status == Status.VERSION_MISMATCH:
                stats["mismatches"] += 1
            elif resp.status == Status.FUNCTION_FALLBACK:
                stats["fallbacks"] += 1
            elif resp.status != Status.OK:
                stats["errors"] += 1
        return resp

    # -- framing -------------------------------------------------------------

    def handle_frame(self, frame: bytes) -> bytes:
        msg, _ = wire.decode(frame)
        if isinstance(msg, ReadCapsule):
            return wire.encode(self.serve_read(msg))
        if isinstance(msg, PushdownCapsule):
            return wire.encode(self.execute_pushdown(msg))
        raise wire.DecodeError(f"unexpected {type(msg).__name__} on target")

    def stats(self) -> dict:
        with self._stats_lock:
            return {
                "reads_served": self.reads_served,
                "read_mismatches": self.read_mismatches,
                "replicas_applied": self.replicas.applied,
                "functions": {str(k): dict(v) for k, v in self._fn_stats.items()},
            }

    def stats_json(self) -> str:
        return json.dumps(self.stats(), sort_keys=True)


# -- network front ends ---------------------------------------------------------


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return bytes(buf)


class _DataHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        target: TargetServer = self.server.target
        while True:
            try:
                frame = wire.read_frame(lambda n: recv_exact(sock, n))
            except ConnectionError:
                return
            except wire.DecodeError as e:
                log.warning("dropping data connection: %s", e)
                return
            try:
                sock.sendall(target.handle_frame(frame))
            except wire.DecodeError as e:
                log.warning("dropping data connection: %s", e)
                return


class _SyncHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        replicas: ReplicaStore = self.server.replicas
        while True:
            try:
                head = recv_exact(sock, RECORD_HEAD_SIZE)
                body = recv_exact(sock, record_size(head) - RECORD_HEAD_SIZE)
                sock.sendall(replicas.handle(head + body))
            except ConnectionError:
                return
            except MalformedRecord as e:
                log.warning("rejecting sync record: %s", e)
                return


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class TargetDaemon:
    """Data-path and sync listeners around one :class:`TargetServer`."""

    def __init__(self, target: TargetServer, listen: tuple[str, int],
                 sync_listen: tuple[str, int]):
        self.target = target
        self.data = _Server(listen, _DataHandler)
        self.data.target = target
        self.sync = _Server(sync_listen, _SyncHandler)
        self.sync.replicas = target.replicas
        self._threads: list[threading.Thread] = []

    @property
    def data_address(self) -> tuple[str, int]:
        return self.data.server_address[:2]

    @property
    def sync_address(self) -> tuple[str, int]:
        return self.sync.server_address[:2]

    def start(self) -> None:
        for srv in (self.data, self.sync):
            t = threading.Thread(target=srv.serve_forever, daemon=True)
            t.start()
            self._threads.append(t)

    def shutdown(self) -> None:
        for srv in (self.data, self.sync):
            srv.shutdown()
            srv.server_close()
        for t in self._threads:
            t.join()
