"""B+-tree node format and the point/range traversal functions.

Node (``NODE_SIZE`` bytes)::

    u32 magic 'BTRE', u8 kind (0 internal, 1 leaf), u8 pad, u16 count, u64 next_leaf
    count x (u64 key, u64 ptr)

Internal ``ptr`` is the file offset of the child whose smallest key is
``key``; leaf ``ptr`` is the file offset of the 64-byte value in the log.
``next_leaf`` links leaves left to right (0 = last leaf).
"""

from __future__ import annotations

import bisect
import struct

from . import (BTREE_LOOKUP, BTREE_RANGE, FALLBACK_BAD_FORMAT, FALLBACK_NO_ROOM, Done,
               Fallback, Resubmit, StepBudget)

NODE_SIZE = 512
VALUE_SIZE = 64
NODE_MAGIC = 0x45525442  # b"BTRE"
KIND_INTERNAL = 0
KIND_LEAF = 1

_NODE_HEAD = struct.Struct("<IBBHQ")
MAX_ENTRIES = (NODE_SIZE - _NODE_HEAD.size) // 16


class BadNode(ValueError):
    pass


def encode_node(kind: int, keys: list[int], ptrs: list[int], next_leaf: int = 0) -> bytes:
    if len(keys) != len(ptrs) or not 0 < len(keys) <= MAX_ENTRIES:
        raise ValueError(f"bad node entry count {len(keys)}")
    body = struct.pack(f"<{2 * len(keys)}Q", *[x for kp in zip(keys, ptrs) for x in kp])
    out = _NODE_HEAD.pack(NODE_MAGIC, kind, 0, len(keys), next_leaf) + body
    return out + bytes(NODE_SIZE - len(out))


def decode_node(block: bytes) -> tuple[int, list[int], list[int], int]:
    """Return ``(kind, keys, ptrs, next_leaf)``; raise :class:`BadNode`."""
    if len(block) < _NODE_HEAD.size:
        raise BadNode("short node")
    magic, kind, _, count, next_leaf = _NODE_HEAD.unpack_from(block, 0)
    if magic != NODE_MAGIC or kind not in (KIND_INTERNAL, KIND_LEAF):
        raise BadNode("bad node header")
    if not 0 < count <= MAX_ENTRIES or len(block) < _NODE_HEAD.size + 16 * count:
        raise BadNode("bad node count")
    flat = struct.unpack_from(f"<{2 * count}Q", block, _NODE_HEAD.size)
    keys = list(flat[0::2])
    if any(a >= b for a, b in zip(keys, keys[1:])):
        raise BadNode("unsorted node")
    return kind, keys, list(flat[1::2]), next_leaf


def child_for(keys: list[int], ptrs: list[int], key: int) -> int:
    return ptrs[max(bisect.bisect_right(keys, key) - 1, 0)]


# -- point lookup -------------------------------------------------------------
#
# scratch: u16 magic 'BL', u8 layout version, u8 state (0 node, 1 log), u32 pad, u64 key
# result:  the 64-byte value (Done(64)); Done(0) means key absent

LOOKUP_MAGIC = 0x4C42
LAYOUT_VERSION = 1
_LOOKUP = struct.Struct("<HBBIQ")
LOOKUP_SCRATCH_SIZE = max(_LOOKUP.size, VALUE_SIZE)


def lookup_scratch(key: int) -> bytearray:
    buf = bytearray(LOOKUP_SCRATCH_SIZE)
    _LOOKUP.pack_into(buf, 0, LOOKUP_MAGIC, LAYOUT_VERSION, 0, 0, key)
    return buf


def lookup_result(scratch: bytes, result_len: int) -> bytes | None:
    return bytes(scratch[:VALUE_SIZE]) if result_len == VALUE_SIZE else None


class BTreeLookup:
    function_id = BTREE_LOOKUP

    def step(self, block, scratch, budget: StepBudget | None = None):
        if len(scratch) < LOOKUP_SCRATCH_SIZE:
            return Fallback(FALLBACK_NO_ROOM)
        magic, ver, state, _, key = _LOOKUP.unpack_from(scratch, 0)
        if magic != LOOKUP_MAGIC or ver != LAYOUT_VERSION:
            return Fallback(FALLBACK_BAD_FORMAT)
        if state == 1:
            if len(block) < VALUE_SIZE:
                return Fallback(FALLBACK_BAD_FORMAT)
            scratch[:VALUE_SIZE] = block[:VALUE_SIZE]
            return Done(VALUE_SIZE)
        try:
            kind, keys, ptrs, _ = decode_node(block)
        except BadNode:
            return Fallback(FALLBACK_BAD_FORMAT)
        if budget is not None:
            budget.tick(len(keys).bit_length() + 1)
        if kind == KIND_INTERNAL:
            return Resubmit(0, child_for(keys, ptrs, key), NODE_SIZE)
        i = bisect.bisect_left(keys, key)
        if i == len(keys) or keys[i] != key:
            return Done(0)
        _LOOKUP.pack_into(scratch, 0, magic, ver, 1, 0, key)
        return Resubmit(0, ptrs[i], VALUE_SIZE)


# -- range scan ---------------------------------------------------------------
#
# scratch header (32 bytes):
#   u16 magic 'BR', u8 layout version, u8 state (0 descend/scan, 1 fetch values),
#   u16 max_results, u16 count, u16 fetch_cursor, u8 more, u8 pad, u64 lo, u64 hi, u32 pad
# work area: count x (u64 key, u64 value_ptr, 64B value)
# result:    u8 more, u8 pad, u16 count, count x (u64 key, 64B value)

RANGE_MAGIC = 0x5242
_RANGE = struct.Struct("<HBBHHHBBQQI")
_SLOT = 16 + VALUE_SIZE
_PAIR = 8 + VALUE_SIZE
_KP = struct.Struct("<QQ")
_RES_HEAD = struct.Struct("<BBH")
DEFAULT_MAX_RESULTS = 24


def range_scratch(lo: int, hi: int, max_results: int = DEFAULT_MAX_RESULTS) -> bytearray:
    buf = bytearray(_RANGE.size + max_results * _SLOT)
    _RANGE.pack_into(buf, 0, RANGE_MAGIC, LAYOUT_VERSION, 0, max_results, 0, 0, 0, 0, lo, hi, 0)
    return buf


def range_result(scratch: bytes, result_len: int) -> tuple[list[tuple[int, bytes]], bool]:
    """Decode ``(pairs, more)``; ``more`` means resume after the last key."""
    more, _, count = _RES_HEAD.unpack_from(scratch, 0)
    if result_len != _RES_HEAD.size + count * _PAIR:
        raise ValueError("range result length mismatch")
    pairs = []
    for i in range(count):
        pos = _RES_HEAD.size + i * _PAIR
        (k,) = struct.unpack_from("<Q", scratch, pos)
        pairs.append((k, bytes(scratch[pos + 8:pos + _PAIR])))
    return pairs, bool(more)


class BTreeRange:
    function_id = BTREE_RANGE

    def step(self, block, scratch, budget: StepBudget | None = None):
        if len(scratch) < _RANGE.size:
            return Fallback(FALLBACK_NO_ROOM)
        (magic, ver, state, max_results, count, cursor, more, _, lo, hi,
         _) = _RANGE.unpack_from(scratch, 0)
        if magic != RANGE_MAGIC or ver != LAYOUT_VERSION:
            return Fallback(FALLBACK_BAD_FORMAT)
        if len(scratch) < _RANGE.size + max_results * _SLOT:
            return Fallback(FALLBACK_NO_ROOM)

        def save(state, count, cursor, more):
            _RANGE.pack_into(scratch, 0, magic, ver, state, max_results, count, cursor, more, 0,
                             lo, hi, 0)

        if state == 1:
            pos = _RANGE.size + cursor * _SLOT + 16
            scratch[pos:pos + VALUE_SIZE] = block[:VALUE_SIZE]
            cursor += 1
            return self._fetch_or_finish(scratch, save, count, cursor, more)

        try:
            kind, keys, ptrs, next_leaf = decode_node(block)
        except BadNode:
            return Fallback(FALLBACK_BAD_FORMAT)
        if kind == KIND_INTERNAL:
            if budget is not None:
                budget.tick(len(keys).bit_length() + 1)
            return Resubmit(0, child_for(keys, ptrs, lo), NODE_SIZE)

        i = bisect.bisect_left(keys, lo)
        while i < len(keys) and keys[i] <= hi and count < max_results:
            if budget is not None:
                budget.tick()
            _KP.pack_into(scratch, _RANGE.size + count * _SLOT, keys[i], ptrs[i])
            count += 1
            i += 1
        if count == max_results and count and lo <= hi:
            more = int((i < len(keys) and keys[i] <= hi) or (i == len(keys) and next_leaf != 0
                                                           and keys[-1] < hi))
            return self._fetch_or_finish(scratch, save, count, 0, more)
        if i == len(keys) and next_leaf and keys[-1] < hi and lo <= hi:
            save(0, count, 0, 0)
            return Resubmit(0, next_leaf, NODE_SIZE)
        return self._fetch_or_finish(scratch, save, count, 0, 0)

    @staticmethod
    def _fetch_or_finish(scratch, save, count, cursor, more):
        if cursor < count:
            save(1, count, cursor, more)
            _, ptr = _KP.unpack_from(scratch, _RANGE.size + cursor * _SLOT)
            return Resubmit(0, ptr, VALUE_SIZE)
        # compact slots into the result layout; destinations never overtake sources
        for j in range(count):
            src = _RANGE.size + j * _SLOT
            dst = _RES_HEAD.size + j * _PAIR
            key = scratch[src:src + 8]
            val = scratch[src + 16:src + _SLOT]
            scratch[dst:dst + 8] = key
            scratch[dst + 8:dst + _PAIR] = val
        _RES_HEAD.pack_into(scratch, 0, more, 0, count)
        return Done(_RES_HEAD.size + count * _PAIR)
