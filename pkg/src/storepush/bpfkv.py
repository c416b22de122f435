"""Read-only B+-tree key-value store with 512-byte nodes and a value log.

File layout::

    header   one node-sized block: u64 magic, u32 height, u32 fanout, u64 n_keys,
             u64 root_offset, u64 leaf_offset, u64 log_offset, u64 log_length
    nodes    level by level from the root down; the last level is the leaves
    log      64-byte values in shuffled (insertion) order

``height`` counts node levels; a lookup that misses every cache reads
``height`` nodes plus one log block, and that chain length is what
``depth`` reports.
"""

from __future__ import annotations

import bisect
import hashlib
import logging
import random
import struct
from dataclasses import dataclass

from .functions import BTREE_LOOKUP, BTREE_RANGE
from .functions.btree import (DEFAULT_MAX_RESULTS, KIND_INTERNAL, KIND_LEAF, MAX_ENTRIES,
                              NODE_SIZE, VALUE_SIZE, child_for, decode_node, encode_node,
                              lookup_result, lookup_scratch, range_result, range_scratch)
from .host import HostClient, Outcome

log = logging.getLogger(__name__)

FILE_MAGIC = 0x31424456464B5642  # arbitrary
_HEADER = struct.Struct("<QIIQQQQQ")


class SizingError(ValueError):
    pass


@dataclass(frozen=True)
class BTreeLayout:
    height: int
    fanout: int
    n_keys: int
    root_offset: int
    leaf_offset: int
    log_offset: int
    log_length: int
    node_size: int = NODE_SIZE

    @property
    def depth(self) -> int:
        return self.height + 1

    def encode(self) -> bytes:
        raw = _HEADER.pack(FILE_MAGIC, self.height, self.fanout, self.n_keys, self.root_offset,
                           self.leaf_offset, self.log_offset, self.log_length)
        return raw + bytes(self.node_size - len(raw))

    @classmethod
    def decode(cls, b: bytes) -> BTreeLayout:
        magic, h, f, n, root, leaf, logo, logl = _HEADER.unpack_from(b, 0)
        if magic != FILE_MAGIC:
            raise ValueError("not a B+-tree store file")
        return cls(h, f, n, root, leaf, logo, logl)


def tree_height(n_keys: int, fanout: int) -> int:
    nodes, h = -(-n_keys // fanout), 1
    while nodes > 1:
        nodes = -(-nodes // fanout)
        h += 1
    return h


def pick_fanout(n_keys: int, depth: int | None) -> int:
    """Largest node fill that gives exactly ``depth - 1`` node levels."""
    if n_keys < 1:
        raise SizingError("need at least one key")
    if depth is None:
        return MAX_ENTRIES
    for f in range(MAX_ENTRIES, 1, -1):
        if tree_height(n_keys, f) == depth - 1:
            return f
    raise SizingError(f"{n_keys} keys cannot form a tree of depth {depth}")


def default_value(key: int) -> bytes:
    return hashlib.blake2b(key.to_bytes(8, "little"), digest_size=VALUE_SIZE).digest()


def build_image(keys: list[int], values: list[bytes], fanout: int, seed: int = 0) -> bytes:
    order = sorted(range(len(keys)), key=keys.__getitem__)
    keys = [keys[i] for i in order]
    values = [values[i] for i in order]
    if any(a >= b for a, b in zip(keys, keys[1:])):
        raise ValueError("duplicate keys")
    # levels bottom-up as lists of (min_key, [entries]) groups
    levels: list[list[list[int]]] = []
    idx = list(range(len(keys)))
    groups = [idx[i:i + fanout] for i in range(0, len(idx), fanout)]
    levels.append(groups)
    while len(levels[-1]) > 1:
        prev = levels[-1]
        levels.append([list(range(i, min(i + fanout, len(prev))))
                       for i in range(0, len(prev), fanout)])
    height = len(levels)
    top_down = levels[::-1]
    # assign node offsets
    offsets: list[list[int]] = []
    pos = NODE_SIZE
    for lvl in top_down:
        offsets.append([pos + i * NODE_SIZE for i in range(len(lvl))])
        pos += len(lvl) * NODE_SIZE
    log_offset = pos
    slots = list(range(len(keys)))
    random.Random(seed).shuffle(slots)
    ptr = [log_offset + s * VALUE_SIZE for s in slots]
    log_buf = bytearray(len(keys) * VALUE_SIZE)
    for i, s in enumerate(slots):
        v = values[i]
        if len(v) != VALUE_SIZE:
            raise ValueError(f"values must be {VALUE_SIZE} bytes")
        log_buf[s * VALUE_SIZE:(s + 1) * VALUE_SIZE] = v
    log_buf += bytes(-len(log_buf) % NODE_SIZE)

    # min key of every node, bottom-up
    min_keys: list[list[int]] = [[keys[g[0]] for g in levels[0]]]
    for lvl in levels[1:]:
        below = min_keys[-1]
        min_keys.append([below[g[0]] for g in lvl])
    min_keys = min_keys[::-1]

    out = bytearray()
    layout = BTreeLayout(height, fanout, len(keys), NODE_SIZE, offsets[-1][0], log_offset,
                         len(keys) * VALUE_SIZE)
    out += layout.encode()
    for d, lvl in enumerate(top_down):
        leaf = d == height - 1
        for i, g in enumerate(lvl):
            if leaf:
                nxt = offsets[d][i + 1] if i + 1 < len(lvl) else 0
                out += encode_node(KIND_LEAF, [keys[j] for j in g], [ptr[j] for j in g], nxt)
            else:
                out += encode_node(KIND_INTERNAL, [min_keys[d + 1][j] for j in g],
                                   [offsets[d + 1][j] for j in g])
    out += log_buf
    return bytes(out)


class _LookupQuery:
    def __init__(self, kv: BpfKV, key: int):
        self.kv, self.key = kv, key

    def run_fallback(self, client: HostClient):
        return self.kv._baseline_get(self.key)


class _RangeQuery:
    def __init__(self, kv: BpfKV, lo: int, hi: int):
        self.kv, self.lo, self.hi = kv, lo, hi

    def run_fallback(self, client: HostClient):
        return self.kv._baseline_range(self.lo, self.hi)


class BpfKV:
    """Client of one B+-tree store file.

    ``cached_levels`` top node levels are kept in host memory; lookups
    start remote work at the first uncached level.
    """

    def __init__(self, client: HostClient, inode_id: int, cached_levels: int = 0):
        self.client = client
        self.inode_id = inode_id
        self.handle = client.open(inode_id)
        self.layout = BTreeLayout.decode(client.read_remote(self.handle, 0, NODE_SIZE))
        if not 0 <= cached_levels <= self.layout.height:
            raise ValueError(f"cached_levels must be in [0, {self.layout.height}]")
        self.cached_levels = cached_levels
        self._cache: dict[int, tuple] = {}
        frontier = [self.layout.root_offset]
        for _ in range(cached_levels):
            nxt = []
            for off in frontier:
                node = decode_node(client.read_remote(self.handle, off, NODE_SIZE))
                self._cache[off] = node
                if node[0] == KIND_INTERNAL:
                    nxt.extend(node[2])
            frontier = nxt
        self.fallbacks = 0

    @classmethod
    def build(cls, client: HostClient, name: str, n_keys: int, depth: int | None = None,
              keys: list[int] | None = None, value_fn=default_value, seed: int = 0,
              cached_levels: int = 0) -> BpfKV:
        if keys is None:
            keys = [2 * i + 1 for i in range(n_keys)]
        fanout = pick_fanout(len(keys), depth)
        image = build_image(keys, [value_fn(k) for k in keys], fanout, seed)
        store = client.store
        inode = store.create_file(name)
        store.append(inode, image)
        client.syncer.sync_all()
        return cls(client, inode, cached_levels)

    def close(self) -> None:
        self.handle.close()

    @property
    def depth(self) -> int:
        return self.layout.depth

    def _descend_cached(self, key: int) -> tuple[int, tuple | None]:
        """Walk cached levels; return ``(first uncached offset, cached leaf or None)``."""
        off = self.layout.root_offset
        for _ in range(self.cached_levels):
            node = self._cache[off]
            if node[0] == KIND_LEAF:
                return off, node
            off = child_for(node[1], node[2], key)
        return off, None

    # -- point lookups --------------------------------------------------------------

    def get(self, key: int, mode: str = "pushdown") -> bytes | None:
        if mode == "baseline":
            return self._baseline_get(key)
        off, leaf = self._descend_cached(key)
        if leaf is not None:
            # everything but the value is in memory
            ptr = self._leaf_ptr(leaf, key)
            return None if ptr is None else self.client.read_remote(self.handle, ptr, VALUE_SIZE)
        scratch = lookup_scratch(key)
        res = self.client.read_pushdown([self.handle], off, NODE_SIZE, BTREE_LOOKUP, scratch)
        if res.outcome is Outcome.OK:
            return lookup_result(res.scratch, res.result_len)
        self.fallbacks += 1
        return self.client.fallback_read_path(_LookupQuery(self, key))

    @staticmethod
    def _leaf_ptr(leaf, key):
        _, keys, ptrs, _ = leaf
        i = bisect.bisect_left(keys, key)
        return ptrs[i] if i < len(keys) and keys[i] == key else None

    def _node(self, off: int):
        node = self._cache.get(off)
        if node is None:
            node = decode_node(self.client.read_remote(self.handle, off, NODE_SIZE))
        return node

    def _baseline_get(self, key: int) -> bytes | None:
        off = self.layout.root_offset
        while True:
            node = self._node(off)
            if node[0] == KIND_LEAF:
                break
            off = child_for(node[1], node[2], key)
        ptr = self._leaf_ptr(node, key)
        return None if ptr is None else self.client.read_remote(self.handle, ptr, VALUE_SIZE)

    # -- range queries ----------------------------------------------------------------

    def get_range(self, lo: int, hi: int, mode: str = "pushdown",
                  max_results: int = DEFAULT_MAX_RESULTS) -> list[tuple[int, bytes]]:
        """All ``(key, value)`` with ``lo <= key <= hi``, sorted by key.

        Pushdown returns at most ``max_results`` pairs per round trip and
        resumes after the last key returned.
        """
        if mode == "baseline":
            return self._baseline_range(lo, hi)
        out: list[tuple[int, bytes]] = []
        cur = lo
        while cur <= hi:
            # with the leaf level cached the chain starts by re-reading that leaf
            off, _ = self._descend_cached(cur)
            scratch = range_scratch(cur, hi, max_results)
            res = self.client.read_pushdown([self.handle], off, NODE_SIZE, BTREE_RANGE, scratch)
            if res.outcome is not Outcome.OK:
                self.fallbacks += 1
                out.extend(self.client.fallback_read_path(_RangeQuery(self, cur, hi)))
                break
            pairs, more = range_result(res.scratch, res.result_len)
            out.extend(pairs)
            if not more or not pairs:
                break
            cur = pairs[-1][0] + 1
        return out

    def _baseline_range(self, lo: int, hi: int) -> list[tuple[int, bytes]]:
        if lo > hi:
            return []
        off = self.layout.root_offset
        while True:
            node = self._node(off)
            if node[0] == KIND_LEAF:
                break
            off = child_for(node[1], node[2], lo)
        hits = []
        while True:
            _, keys, ptrs, nxt = node
            i = bisect.bisect_left(keys, lo)
            while i < len(keys) and keys[i] <= hi:
                hits.append((keys[i], ptrs[i]))
                i += 1
            if i < len(keys) or not nxt or keys[-1] >= hi:
                break
            node = self._node(nxt)
        return [(k, self.client.read_remote(self.handle, p, VALUE_SIZE)) for k, p in hits]
