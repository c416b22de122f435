"""LSM lookup over an I/O traversal plan of SST blocks.

scratch::

    u16 magic 'SC', u8 layout version, u8 stage (0 index, 1 data), u8 n_entries,
    u8 cursor, u16 key_len, key,
    n_entries x (u8 fd_index, u8 start_stage, u64 offset, u32 length)

result (written at offset 0)::

    u8 status (0 not in plan, 1 value, 2 tombstone), u8 fd_index of the file that
    answered, u32 value_len, value
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from ..sstable import CorruptBlock, block_get, index_lookup
from . import FALLBACK_BAD_FORMAT, FALLBACK_NO_ROOM, SST_CHAIN, Done, Fallback, Resubmit, StepBudget

SST_MAGIC = 0x4353
LAYOUT_VERSION = 1
STAGE_INDEX = 0
STAGE_DATA = 1

RESULT_NOT_FOUND = 0
RESULT_VALUE = 1
RESULT_TOMBSTONE = 2

_HEAD = struct.Struct("<HBBBBH")
_ENTRY = struct.Struct("<BBQI")
_RESULT = struct.Struct("<BBI")


@dataclass(frozen=True)
class SstPlanEntry:
    fd_index: int
    start_stage: int
    offset: int
    length: int


def plan_scratch(key: bytes, entries: list[SstPlanEntry], size: int = 4096) -> bytearray:
    if not 0 < len(entries) <= 255:
        raise ValueError("plan must have 1..255 entries")
    need = _HEAD.size + len(key) + len(entries) * _ENTRY.size
    buf = bytearray(max(size, need, _RESULT.size))
    _HEAD.pack_into(buf, 0, SST_MAGIC, LAYOUT_VERSION, entries[0].start_stage, len(entries), 0,
                    len(key))
    buf[_HEAD.size:_HEAD.size + len(key)] = key
    pos = _HEAD.size + len(key)
    for e in entries:
        _ENTRY.pack_into(buf, pos, e.fd_index, e.start_stage, e.offset, e.length)
        pos += _ENTRY.size
    return buf


@dataclass(frozen=True)
class ChainResult:
    status: int
    fd_index: int
    value: bytes | None


def decode_result(scratch: bytes, result_len: int) -> ChainResult:
    status, fd, vlen = _RESULT.unpack_from(scratch, 0)
    if status == RESULT_VALUE:
        if result_len != _RESULT.size + vlen:
            raise ValueError("result length mismatch")
        return ChainResult(status, fd, bytes(scratch[_RESULT.size:_RESULT.size + vlen]))
    return ChainResult(status, fd, None)


class SstChain:
    function_id = SST_CHAIN

    def step(self, block, scratch, budget: StepBudget | None = None):
        if len(scratch) < _HEAD.size:
            return Fallback(FALLBACK_BAD_FORMAT)
        magic, ver, stage, n, cursor, klen = _HEAD.unpack_from(scratch, 0)
        if magic != SST_MAGIC or ver != LAYOUT_VERSION or cursor >= n:
            return Fallback(FALLBACK_BAD_FORMAT)
        key = bytes(scratch[_HEAD.size:_HEAD.size + klen])
        base = _HEAD.size + klen
        if len(scratch) < base + n * _ENTRY.size:
            return Fallback(FALLBACK_BAD_FORMAT)
        tick = budget.tick if budget is not None else None
        fd = _ENTRY.unpack_from(scratch, base + cursor * _ENTRY.size)[0]
        try:
            if stage == STAGE_INDEX:
                handle = index_lookup(block, key, tick)
                if handle is not None:
                    _HEAD.pack_into(scratch, 0, magic, ver, STAGE_DATA, n, cursor, klen)
                    return Resubmit(fd, handle.offset, handle.length)
            else:
                found, value = block_get(block, key, tick)
                if found:
                    return self._finish(scratch, fd, value)
        except CorruptBlock:
            return Fallback(FALLBACK_BAD_FORMAT)
        # key is not in this file: move on to the next planned file
        cursor += 1
        if cursor == n:
            _RESULT.pack_into(scratch, 0, RESULT_NOT_FOUND, 0, 0)
            return Done(_RESULT.size)
        nfd, nstage, off, length = _ENTRY.unpack_from(scratch, base + cursor * _ENTRY.size)
        _HEAD.pack_into(scratch, 0, magic, ver, nstage, n, cursor, klen)
        return Resubmit(nfd, off, length)

    @staticmethod
    def _finish(scratch, fd, value):
        if value is None:
            _RESULT.pack_into(scratch, 0, RESULT_TOMBSTONE, fd, 0)
            return Done(_RESULT.size)
        if _RESULT.size + len(value) > len(scratch):
            return Fallback(FALLBACK_NO_ROOM)
        _RESULT.pack_into(scratch, 0, RESULT_VALUE, fd, len(value))
        scratch[_RESULT.size:_RESULT.size + len(value)] = value
        return Done(_RESULT.size + len(value))
