"""Framing and codec for data-path messages.

Frame: ``[u32 total_len][u8 msg_type][payload]`` where ``total_len`` counts
the type byte plus the payload. All integers are little-endian.

Payloads::

    READ           u64 request_id, u64 inode, u64 expected_version, u64 offset, u32 length
    READ_RESP      u64 request_id, u8 status, u32 data_len, data
    PUSHDOWN       u64 request_id, u32 function_id, u8 fd_count,
                   fd_count x (u64 inode, u64 expected_version),
                   u8 fd_index, u64 offset, u32 length, u32 scratch_len, scratch
    PUSHDOWN_RESP  u64 request_id, u8 status, u32 resubmissions, u32 device_reads,
                   u32 scratch_len, scratch  (scratch only for OK / FUNCTION_FALLBACK)
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

MSG_READ = 0x01
MSG_READ_RESP = 0x02
MSG_PUSHDOWN = 0x03
MSG_PUSHDOWN_RESP = 0x04

MAX_FDS = 16
MAX_SCRATCH = 64 * 1024
MAX_FRAME = 16 * 1024 * 1024

_LEN = struct.Struct("<I")
_READ = struct.Struct("<QQQQI")
_READ_RESP = struct.Struct("<QBI")
_PD_HEAD = struct.Struct("<QIB")
_FD = struct.Struct("<QQ")
_PD_TAIL = struct.Struct("<BQII")
_PD_RESP = struct.Struct("<QBIII")


class Status(enum.IntEnum):
    OK = 0
    VERSION_MISMATCH = 1
    FUNCTION_FALLBACK = 2
    FUNCTION_ERROR = 3
    IO_ERROR = 4
    LIMIT_EXCEEDED = 5


_SCRATCH_STATUSES = (Status.OK, Status.FUNCTION_FALLBACK)


class DecodeError(ValueError):
    pass


class Truncated(DecodeError):
    """The buffer ends before the frame does."""


@dataclass(frozen=True)
class ReadCapsule:
    request_id: int
    inode_id: int
    expected_version: int
    offset: int
    length: int


@dataclass(frozen=True)
class ReadResponse:
    request_id: int
    status: Status
    data: bytes = b""


@dataclass(frozen=True)
class PushdownCapsule:
    request_id: int
    function_id: int
    fds: tuple[tuple[int, int], ...]  # (inode_id, expected_version)
    fd_index: int
    offset: int
    length: int
    scratch: bytes

    @property
    def fd_count(self) -> int:
        return len(self.fds)


@dataclass(frozen=True)
class PushdownResponse:
    request_id: int
    status: Status
    resubmission_count: int = 0
    device_reads: int = 0
    scratch: bytes | None = None


def _frame(msg_type: int, payload: bytes) -> bytes:
    return _LEN.pack(len(payload) + 1) + bytes((msg_type,)) + payload


def encode(msg) -> bytes:
    if isinstance(msg, ReadCapsule):
        return _frame(MSG_READ, _READ.pack(msg.request_id, msg.inode_id, msg.expected_version,
                                           msg.offset, msg.length))
    if isinstance(msg, ReadResponse):
        return _frame(MSG_READ_RESP,
                      _READ_RESP.pack(msg.request_id, int(msg.status), len(msg.data)) + msg.data)
    if isinstance(msg, PushdownCapsule):
        if not 1 <= len(msg.fds) <= MAX_FDS:
            raise ValueError(f"fd_count {len(msg.fds)} outside [1, {MAX_FDS}]")
        if not 0 <= msg.fd_index < len(msg.fds):
            raise ValueError("fd_index out of range")
        if len(msg.scratch) > MAX_SCRATCH:
            raise ValueError("scratch exceeds MAX_SCRATCH")
        parts = [_PD_HEAD.pack(msg.request_id, msg.function_id, len(msg.fds))]
        parts += [_FD.pack(i, v) for i, v in msg.fds]
        parts.append(_PD_TAIL.pack(msg.fd_index, msg.offset, msg.length, len(msg.scratch)))
        parts.append(bytes(msg.scratch))
        return _frame(MSG_PUSHDOWN, b"".join(parts))
    if isinstance(msg, PushdownResponse):
        scratch = msg.scratch
        if (scratch is not None) != (msg.status in _SCRATCH_STATUSES):
            raise ValueError(f"scratch presence does not match status {msg.status.name}")
        scratch = bytes(scratch or b"")
        if len(scratch) > MAX_SCRATCH:
            raise ValueError("scratch exceeds MAX_SCRATCH")
        return _frame(MSG_PUSHDOWN_RESP,
                      _PD_RESP.pack(msg.request_id, int(msg.status), msg.resubmission_count,
                                    msg.device_reads, len(scratch)) + scratch)
    raise TypeError(f"cannot encode {type(msg).__name__}")


def frame_length(buf: bytes | bytearray | memoryview) -> int:
    """Total bytes of the frame at the start of ``buf`` (header included)."""
    if len(buf) < _LEN.size:
        raise Truncated("short frame header")
    (total,) = _LEN.unpack_from(buf, 0)
    if total == 0:
        raise DecodeError("empty frame")
    if total > MAX_FRAME:
        raise DecodeError(f"frame length {total} exceeds cap")
    return total + _LEN.size


def _status(v: int) -> Status:
    try:
        return Status(v)
    except ValueError:
        raise DecodeError(f"unknown status {v}") from None


def decode(buf: bytes | bytearray | memoryview):
    """Decode one frame from the front of ``buf``.

    Returns ``(message, consumed)``; raises :class:`DecodeError` for anything
    that is not exactly one well-formed frame prefix.
    """
    mv = memoryview(buf)
    n = frame_length(mv)
    if len(mv) < n:
        raise Truncated(f"frame needs {n} bytes, have {len(mv)}")
    msg_type = mv[4]
    body = mv[5:n]
    try:
        msg = _DECODERS[msg_type](body)
    except KeyError:
        raise DecodeError(f"unknown message type {msg_type:#x}") from None
    except struct.error as e:
        raise DecodeError(str(e)) from None
    return msg, n


def _need(body, size: int) -> None:
    if len(body) != size:
        raise DecodeError(f"payload length {len(body)} != {size}")


def _dec_read(body):
    _need(body, _READ.size)
    return ReadCapsule(*_READ.unpack_from(body, 0))


def _dec_read_resp(body):
    if len(body) < _READ_RESP.size:
        raise DecodeError("short READ_RESP")
    rid, st, dlen = _READ_RESP.unpack_from(body, 0)
    _need(body, _READ_RESP.size + dlen)
    return ReadResponse(rid, _status(st), bytes(body[_READ_RESP.size:]))


def _dec_pushdown(body):
    if len(body) < _PD_HEAD.size:
        raise DecodeError("short PUSHDOWN")
    rid, fid, count = _PD_HEAD.unpack_from(body, 0)
    if not 1 <= count <= MAX_FDS:
        raise DecodeError(f"fd_count {count} outside [1, {MAX_FDS}]")
    pos = _PD_HEAD.size
    if len(body) < pos + count * _FD.size + _PD_TAIL.size:
        raise DecodeError("short PUSHDOWN")
    fds = tuple(_FD.unpack_from(body, pos + i * _FD.size) for i in range(count))
    pos += count * _FD.size
    fd_index, offset, length, slen = _PD_TAIL.unpack_from(body, pos)
    pos += _PD_TAIL.size
    if fd_index >= count:
        raise DecodeError("fd_index >= fd_count")
    if slen > MAX_SCRATCH:
        raise DecodeError("scratch exceeds MAX_SCRATCH")
    _need(body, pos + slen)
    return PushdownCapsule(rid, fid, fds, fd_index, offset, length, bytes(body[pos:]))


def _dec_pushdown_resp(body):
    if len(body) < _PD_RESP.size:
        raise DecodeError("short PUSHDOWN_RESP")
    rid, st, resub, reads, slen = _PD_RESP.unpack_from(body, 0)
    status = _status(st)
    if slen > MAX_SCRATCH:
        raise DecodeError("scratch exceeds MAX_SCRATCH")
    _need(body, _PD_RESP.size + slen)
    if status in _SCRATCH_STATUSES:
        scratch = bytes(body[_PD_RESP.size:])
    elif slen:
        raise DecodeError(f"scratch present with status {status.name}")
    else:
        scratch = None
    return PushdownResponse(rid, status, resub, reads, scratch)


_DECODERS = {
    MSG_READ: _dec_read,
    MSG_READ_RESP: _dec_read_resp,
    MSG_PUSHDOWN: _dec_pushdown,
    MSG_PUSHDOWN_RESP: _dec_pushdown_resp,
}


def read_frame(recv_exact) -> bytes:
    """Read one frame using ``recv_exact(n) -> bytes`` (e.g. from a socket).

    The declared length is validated before the body is requested, so a
    hostile header cannot make the reader allocate more than ``MAX_FRAME``.
    """
    head = recv_exact(_LEN.size)
    n = frame_length(head)
    return head + recv_exact(n - _LEN.size)
