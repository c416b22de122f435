"""Data-path transports. Each call to ``roundtrip`` is one network round trip."""

from __future__ import annotations

import socket
import threading
from typing import Callable, Protocol

from . import wire
from .target import TargetServer, recv_exact


class Transport(Protocol):
    def roundtrip(self, frame: bytes) -> bytes: ...


class _Counting:
    def __init__(self):
        self._lock = threading.Lock()
        self.round_trips = 0
        self.bytes_sent = 0
        self.bytes_received = 0

    def _count(self, sent: int, received: int) -> None:
        with self._lock:
            self.round_trips += 1
            self.bytes_sent += sent
            self.bytes_received += received

    def reset_counters(self) -> None:
        with self._lock:
            self.round_trips = self.bytes_sent = self.bytes_received = 0


class LoopbackTransport(_Counting):
    """Calls the target in-process.

    ``before(frame)`` runs before the target sees the request and
    ``after(frame, response)`` after it answered but before the host gets
    the response, which is where tests inject mid-flight mutations.
    """

    def __init__(self, server: TargetServer,
                 before: Callable[[bytes], None] | None = None,
                 after: Callable[[bytes, bytes], None] | None = None):
        super().__init__()
        self.server = server
        self.before = before
        self.after = after

    def roundtrip(self, frame: bytes) -> bytes:
        if self.before is not None:
            self.before(frame)
        resp = self.server.handle_frame(frame)
        if self.after is not None:
            self.after(frame, resp)
        self._count(len(frame), len(resp))
        return resp


class TcpTransport(_Counting):
    """One persistent connection per calling thread."""

    def __init__(self, addr: tuple[str, int], timeout: float = 10.0):
        super().__init__()
        self.addr = addr
        self.timeout = timeout
        self._local = threading.local()
        self._socks: list[socket.socket] = []

    def _sock(self) -> socket.socket:
        s = getattr(self._local, "sock", None)
        if s is None:
            s = socket.create_connection(self.addr, timeout=self.timeout)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._local.sock = s
            self._socks.append(s)
        return s

    def roundtrip(self, frame: bytes) -> bytes:
        s = self._sock()
        try:
            s.sendall(frame)
            resp = wire.read_frame(lambda n: recv_exact(s, n))
        except OSError:
            self._local.sock = None
            s.close()
            raise
        self._count(len(frame), len(resp))
        return resp

    def close(self) -> None:
        for s in self._socks:
            s.close()
        self._socks.clear()
        self._local = threading.local()
