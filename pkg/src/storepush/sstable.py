"""SST file format shared by the LSM store (writer, client reads) and the
target-side chain parser.

Layout, little-endian::

    data block*   entries, u32 restart_offset * n, u32 n
                  entry = u16 key_len, key, u32 val_len, val   (val_len 0xFFFFFFFF = tombstone)
    index block   same block format; key = last key of a data block,
                  val = u64 offset, u32 length of that block
    filter block  (optional) u8 k, u32 nbits, bit array
    footer        u64 index_off, u32 index_len, u64 filter_off, u32 filter_len,
                  u32 entry_count, u64 magic; padded to one device block

Every block starts on a device-block boundary; the handle length is the
unpadded content length.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

SST_MAGIC = 0x5453534B56505553  # arbitrary
TOMBSTONE = 0xFFFFFFFF
DATA_BLOCK_SIZE = 4096
RESTART_INTERVAL = 16

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_HANDLE = struct.Struct("<QI")
_FOOTER = struct.Struct("<QIQIIQ")
_BLOOM_HEAD = struct.Struct("<BI")


class CorruptBlock(ValueError):
    pass


@dataclass(frozen=True)
class BlockHandle:
    offset: int
    length: int

    def encode(self) -> bytes:
        return _HANDLE.pack(self.offset, self.length)

    @classmethod
    def decode(cls, b: bytes) -> BlockHandle:
        if len(b) != _HANDLE.size:
            raise CorruptBlock("bad handle")
        return cls(*_HANDLE.unpack(b))


def entry_size(key: bytes, value: bytes | None) -> int:
    return 6 + len(key) + (0 if value is None else len(value))


def encode_entry(key: bytes, value: bytes | None) -> bytes:
    if value is None:
        return _U16.pack(len(key)) + key + _U32.pack(TOMBSTONE)
    return _U16.pack(len(key)) + key + _U32.pack(len(value)) + value


class BlockBuilder:
    def __init__(self, restart_interval: int = RESTART_INTERVAL):
        self.restart_interval = restart_interval
        self.parts: list[bytes] = []
        self.restarts: list[int] = []
        self.size = 0
        self.count = 0
        self.last_key: bytes | None = None

    def add(self, key: bytes, value: bytes | None) -> None:
        if self.count % self.restart_interval == 0:
            self.restarts.append(self.size)
        e = encode_entry(key, value)
        self.parts.append(e)
        self.size += len(e)
        self.count += 1
        self.last_key = key

    def estimated_size(self, extra: int = 0, extra_restart: bool = True) -> int:
        n = len(self.restarts) + (1 if extra_restart else 0)
        return self.size + extra + 4 * n + 4

    def finish(self) -> bytes:
        tail = b"".join(_U32.pack(r) for r in self.restarts) + _U32.pack(len(self.restarts))
        return b"".join(self.parts) + tail


def _entry_at(block, pos: int, end: int):
    if pos + 2 > end:
        raise CorruptBlock("entry header past end")
    (klen,) = _U16.unpack_from(block, pos)
    kend = pos + 2 + klen
    if kend + 4 > end:
        raise CorruptBlock("entry key past end")
    key = bytes(block[pos + 2:kend])
    (vlen,) = _U32.unpack_from(block, kend)
    if vlen == TOMBSTONE:
        return key, None, kend + 4
    vend = kend + 4 + vlen
    if vend > end:
        raise CorruptBlock("entry value past end")
    return key, bytes(block[kend + 4:vend]), vend


def _restarts(block) -> tuple[list[int], int]:
    if len(block) < 4:
        raise CorruptBlock("short block")
    (n,) = _U32.unpack_from(block, len(block) - 4)
    end = len(block) - 4 - 4 * n
    if n == 0 or end < 0:
        raise CorruptBlock("bad restart count")
    rs = list(struct.unpack_from(f"<{n}I", block, end))
    if rs[0] != 0 or any(a >= b for a, b in zip(rs, rs[1:])) or rs[-1] >= end:
        raise CorruptBlock("bad restart array")
    return rs, end


def block_seek(block, key: bytes, tick=None):
    """Find the first entry with entry_key >= key.

    Returns ``(entry_key, value)`` or ``None`` past the end; ``value`` is
    ``None`` for a tombstone. ``tick`` is called once per probe.
    """
    rs, end = _restarts(block)
    lo, hi = 0, len(rs) - 1
    # last restart whose key is < key
    while lo < hi:
        if tick:
            tick()
        mid = (lo + hi + 1) // 2
        k, _, _ = _entry_at(block, rs[mid], end)
        if k < key:
            lo = mid
        else:
            hi = mid - 1
    pos = rs[lo]
    while pos < end:
        if tick:
            tick()
        k, v, nxt = _entry_at(block, pos, end)
        if k >= key:
            return k, v
        pos = nxt
    return None


def block_get(block, key: bytes, tick=None):
    """``(True, value_or_None)`` when the key is in the block, else ``(False, None)``."""
    hit = block_seek(block, key, tick)
    if hit is not None and hit[0] == key:
        return True, hit[1]
    return False, None


def block_entries(block):
    _, end = _restarts(block)
    pos = 0
    out = []
    while pos < end:
        k, v, pos = _entry_at(block, pos, end)
        out.append((k, v))
    return out


def index_lookup(index_block, key: bytes, tick=None) -> BlockHandle | None:
    hit = block_seek(index_block, key, tick)
    if hit is None:
        return None
    if hit[1] is None:
        raise CorruptBlock("tombstone in index block")
    return BlockHandle.decode(hit[1])


class BloomFilter:
    def __init__(self, nbits: int, k: int, bits: bytearray | None = None):
        self.nbits = max(nbits, 8)
        self.k = k
        self.bits = bits if bits is not None else bytearray((self.nbits + 7) // 8)

    @classmethod
    def for_keys(cls, keys, bits_per_key: int = 10) -> BloomFilter:
        keys = list(keys)
        k = max(1, min(30, round(bits_per_key * math.log(2))))
        bf = cls(len(keys) * bits_per_key, k)
        for key in keys:
            bf.add(key)
        return bf

    def _probes(self, key: bytes):
        h = hashlib.blake2b(key, digest_size=16).digest()
        h1 = int.from_bytes(h[:8], "little")
        h2 = int.from_bytes(h[8:], "little") | 1
        for i in range(self.k):
            yield (h1 + i * h2) % self.nbits

    def add(self, key: bytes) -> None:
        for b in self._probes(key):
            self.bits[b >> 3] |= 1 << (b & 7)

    def may_contain(self, key: bytes) -> bool:
        return all(self.bits[b >> 3] & (1 << (b & 7)) for b in self._probes(key))

    def encode(self) -> bytes:
        return _BLOOM_HEAD.pack(self.k, self.nbits) + bytes(self.bits)

    @classmethod
    def decode(cls, b: bytes) -> BloomFilter:
        k, nbits = _BLOOM_HEAD.unpack_from(b, 0)
        return cls(nbits, k, bytearray(b[_BLOOM_HEAD.size:]))


@dataclass(frozen=True)
class Footer:
    index: BlockHandle
    filter: BlockHandle | None
    entry_count: int

    def encode(self, block_size: int) -> bytes:
        f = self.filter or BlockHandle(0, 0)
        raw = _FOOTER.pack(self.index.offset, self.index.length, f.offset, f.length,
                           self.entry_count, SST_MAGIC)
        return raw + bytes(block_size - len(raw))

    @classmethod
    def decode(cls, b: bytes) -> Footer:
        io, il, fo, fl, n, magic = _FOOTER.unpack_from(b, 0)
        if magic != SST_MAGIC:
            raise CorruptBlock("bad footer magic")
        return cls(BlockHandle(io, il), BlockHandle(fo, fl) if fl else None, n)


@dataclass
class BuiltTable:
    """Everything the writer knows about a freshly built SST image."""

    image: bytes
    data_handles: list[BlockHandle]
    index_block: bytes
    index_handle: BlockHandle
    filter: BloomFilter | None
    filter_handle: BlockHandle | None
    min_key: bytes
    max_key: bytes
    entry_count: int


def build_table(items, block_size: int, data_block_size: int = DATA_BLOCK_SIZE,
                bloom_bits_per_key: int | None = None) -> BuiltTable:
    """Serialize sorted ``(key, value_or_None)`` pairs into an SST image."""
    out = bytearray()
    handles: list[BlockHandle] = []
    index = BlockBuilder(restart_interval=1)
    keys: list[bytes] = []
    cur = BlockBuilder()

    def pad():
        out.extend(bytes(-len(out) % block_size))

    def flush():
        nonlocal cur
        if cur.count == 0:
            return
        body = cur.finish()
        h = BlockHandle(len(out), len(body))
        out.extend(body)
        pad()
        handles.append(h)
        index.add(cur.last_key, h.encode())
        cur = BlockBuilder()

    prev = None
    for key, value in items:
        if prev is not None and key <= prev:
            raise ValueError("keys must be strictly increasing")
        prev = key
        if cur.count and cur.estimated_size(entry_size(key, value)) > data_block_size:
            flush()
        cur.add(key, value)
        keys.append(key)
    flush()
    if not keys:
        raise ValueError("empty table")
    index_block = index.finish()
    index_handle = BlockHandle(len(out), len(index_block))
    out.extend(index_block)
    pad()
    bloom = None
    filter_handle = None
    if bloom_bits_per_key:
        bloom = BloomFilter.for_keys(keys, bloom_bits_per_key)
        enc = bloom.encode()
        filter_handle = BlockHandle(len(out), len(enc))
        out.extend(enc)
        pad()
    out.extend(Footer(index_handle, filter_handle, len(keys)).encode(block_size))
    return BuiltTable(bytes(out), handles, index_block, index_handle, bloom, filter_handle,
                      keys[0], keys[-1], len(keys))


def table_get(image: bytes, key: bytes, block_size: int):
    """Straight in-memory lookup over a whole image (test oracle helper)."""
    footer = Footer.decode(image[-block_size:])
    ih = footer.index
    h = index_lookup(image[ih.offset:ih.offset + ih.length], key)
    if h is None:
        return False, None
    return block_get(image[h.offset:h.offset + h.length], key)
