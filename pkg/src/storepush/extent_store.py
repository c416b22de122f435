"""Block device and an extent-mapped file layer with versioned mappings.

The host owns the authoritative :class:`ExtentStore`; the target keeps
replicas of the per-inode :class:`ExtentMap` snapshots (see ``sync``).
Every mutation of a file's block mapping bumps its version, and the
version is what the pushdown safety checks compare.
"""

from __future__ import annotations

import bisect
import logging
import os
import random
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

log = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 512


class ExtentError(Exception):
    pass


class UnknownInode(ExtentError, KeyError):
    pass


class DuplicateName(ExtentError):
    pass


class DeviceFull(ExtentError):
    pass


class OutOfRange(ExtentError):
    """A file range is not (fully) mapped by the extent map."""


class BlockDevice:
    """Fixed-geometry block array backed by memory or by a flat file.

    The backing file is a raw block array with no header.
    """

    def __init__(self, capacity_blocks: int, block_size: int = DEFAULT_BLOCK_SIZE,
                 path: str | os.PathLike | None = None):
        if block_size <= 0 or capacity_blocks <= 0:
            raise ValueError("block_size and capacity_blocks must be positive")
        self.block_size = block_size
        self.capacity_blocks = capacity_blocks
        self.path = path
        self._fd = None
        self._mem = None
        if path is None:
            self._mem = bytearray(block_size * capacity_blocks)
        else:
            self._fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
            size = block_size * capacity_blocks
            if os.fstat(self._fd).st_size < size:
                os.ftruncate(self._fd, size)

    def _check(self, block: int, nbytes: int) -> None:
        if nbytes % self.block_size:
            raise ValueError(f"length {nbytes} is not a multiple of block size {self.block_size}")
        if block < 0 or block + nbytes // self.block_size > self.capacity_blocks:
            raise OutOfRange(f"blocks [{block}, {block + nbytes // self.block_size}) beyond device")

    def read(self, block: int, nblocks: int = 1) -> bytes:
        nbytes = nblocks * self.block_size
        self._check(block, nbytes)
        off = block * self.block_size
        if self._mem is not None:
            return bytes(self._mem[off:off + nbytes])
        return os.pread(self._fd, nbytes, off)

    def write(self, block: int, data: bytes) -> None:
        self._check(block, len(data))
        off = block * self.block_size
        if self._mem is not None:
            self._mem[off:off + len(data)] = data
        else:
            os.pwrite(self._fd, data, off)

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


@dataclass(frozen=True)
class Extent:
    file_offset: int
    device_block: int
    length_blocks: int


@dataclass(frozen=True)
class ExtentMap:
    """Immutable snapshot of one inode's mapping at one version."""

    inode_id: int
    version: int
    extents: tuple[Extent, ...] = ()
    file_length: int = 0
    block_size: int = DEFAULT_BLOCK_SIZE

    def lookup(self, file_offset: int, length: int) -> list[tuple[int, int]]:
        return lookup_extent(self, file_offset, length)

    def device_runs(self, offset: int, length: int) -> list[tuple[int, int]]:
        """Device block runs covering an arbitrary byte range (block-rounded)."""
        bs = self.block_size
        start = offset - offset % bs
        end = offset + length
        end += -end % bs
        return lookup_extent(self, start, end - start)


def lookup_extent(emap: ExtentMap, file_offset: int, length: int) -> list[tuple[int, int]]:
    """Translate ``[file_offset, file_offset+length)`` into device runs.

    Returns ``(device_block, length_blocks)`` pairs in file order; runs that
    are contiguous on the device are merged. Raises :class:`OutOfRange` when
    any part of the range lies outside the mapped file.
    """
    bs = emap.block_size
    if file_offset % bs:
        raise ValueError(f"offset {file_offset} not block-aligned")
    if length <= 0:
        raise ValueError("length must be positive")
    end = file_offset + length
    if file_offset >= emap.file_length or end > emap.file_length:
        raise OutOfRange(f"[{file_offset}, {end}) outside file of length {emap.file_length}")
    first = file_offset // bs
    last = -(-end // bs)  # exclusive, in file blocks
    starts = [e.file_offset // bs for e in emap.extents]
    i = bisect.bisect_right(starts, first) - 1
    runs: list[tuple[int, int]] = []
    cur = first
    while cur < last:
        if i < 0 or i >= len(emap.extents):
            raise OutOfRange(f"file block {cur} unmapped")
        ext = emap.extents[i]
        ext_start = ext.file_offset // bs
        if not ext_start <= cur < ext_start + ext.length_blocks:
            raise OutOfRange(f"file block {cur} unmapped")
        take = min(last, ext_start + ext.length_blocks) - cur
        dev = ext.device_block + (cur - ext_start)
        if runs and runs[-1][0] + runs[-1][1] == dev:
            runs[-1] = (runs[-1][0], runs[-1][1] + take)
        else:
            runs.append((dev, take))
        cur += take
        i += 1
    return runs


def read_mapped(device: BlockDevice, emap: ExtentMap, offset: int, length: int) -> bytes:
    """Read an arbitrary byte range of a file through ``emap``."""
    runs = emap.device_runs(offset, length)
    data = b"".join(device.read(b, n) for b, n in runs)
    skip = offset % emap.block_size
    return data[skip:skip + length]


class InodeRef:
    """Held reference to an inode; blocks are not reclaimed while any is open."""

    def __init__(self, store: ExtentStore, inode_id: int):
        self.store = store
        self.inode_id = inode_id
        self.closed = False

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.store._release(self.inode_id)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class _Inode:
    inode_id: int
    name: str | None
    emap: ExtentMap
    refcount: int = 0
    deleted: bool = False
    blocks: list[int] = field(default_factory=list)  # device block per file block


class _Allocator:
    """First-fit allocator over sorted free runs."""

    def __init__(self, capacity: int):
        self.starts = [0]
        self.lengths = [capacity]
        self.free_blocks = capacity

    def alloc_run(self, n: int) -> tuple[int, int] | None:
        """Take up to ``n`` blocks from the first run that fits (or the largest)."""
        best = None
        for i, (s, ln) in enumerate(zip(self.starts, self.lengths)):
            if ln >= n:
                best = i
                break
            if best is None or ln > self.lengths[best]:
                best = i
        if best is None:
            return None
        s, ln = self.starts[best], self.lengths[best]
        take = min(n, ln)
        if take == ln:
            del self.starts[best]
            del self.lengths[best]
        else:
            self.starts[best] = s + take
            self.lengths[best] = ln - take
        self.free_blocks -= take
        return s, take

    def take_block(self, block: int) -> bool:
        """Remove ``block`` from the free set if it starts a free run."""
        i = bisect.bisect_left(self.starts, block)
        if i == len(self.starts) or self.starts[i] != block:
            return False
        if self.lengths[i] == 1:
            del self.starts[i]
            del self.lengths[i]
        else:
            self.starts[i] += 1
            self.lengths[i] -= 1
        self.free_blocks -= 1
        return True

    def free(self, start: int, n: int) -> None:
        i = bisect.bisect_left(self.starts, start)
        self.starts.insert(i, start)
        self.lengths.insert(i, n)
        self.free_blocks += n
        if i + 1 < len(self.starts) and start + n == self.starts[i + 1]:
            self.lengths[i] += self.lengths[i + 1]
            del self.starts[i + 1]
            del self.lengths[i + 1]
        if i > 0 and self.starts[i - 1] + self.lengths[i - 1] == start:
            self.lengths[i - 1] += self.lengths[i]
            del self.starts[i]
            del self.lengths[i]

    def owns(self, block: int) -> bool:
        i = bisect.bisect_right(self.starts, block) - 1
        return i >= 0 and block < self.starts[i] + self.lengths[i]


def _runs(blocks: Iterable[int]) -> list[tuple[int, int]]:
    runs: list[tuple[int, int]] = []
    for b in blocks:
        if runs and runs[-1][0] + runs[-1][1] == b:
            runs[-1] = (runs[-1][0], runs[-1][1] + 1)
        else:
            runs.append((b, 1))
    return runs


def _extents_for(blocks: list[int], block_size: int) -> tuple[Extent, ...]:
    out = []
    fblock = 0
    for dev, n in _runs(blocks):
        out.append(Extent(fblock * block_size, dev, n))
        fblock += n
    return tuple(out)


class ExtentStore:
    """Files as versioned extent lists on a :class:`BlockDevice`.

    ``fragment_prob`` makes the allocator split an append into two
    non-contiguous pieces with that probability, so multi-extent files
    show up in tests without filling the device first.
    """

    def __init__(self, device: BlockDevice, fragment_prob: float = 0.0,
                 seed: int | None = None):
        self.device = device
        self.block_size = device.block_size
        self.fragment_prob = fragment_prob
        self._rng = random.Random(seed)
        self._lock = threading.RLock()
        self._alloc = _Allocator(device.capacity_blocks)
        self._inodes: dict[int, _Inode] = {}
        self._names: dict[str, int] = {}
        self._next_inode = 1
        self._listeners: list[Callable[[int, int], None]] = []

    # -- observation -------------------------------------------------------

    def add_listener(self, fn: Callable[[int, int], None]) -> None:
        """Call ``fn(inode_id, new_version)`` after every mapping change."""
        self._listeners.append(fn)

    def _changed(self, inode_id: int, version: int) -> None:
        for fn in self._listeners:
            fn(inode_id, version)

    def _get(self, inode_id: int) -> _Inode:
        try:
            return self._inodes[inode_id]
        except KeyError:
            raise UnknownInode(inode_id) from None

    def snapshot(self, inode_id: int) -> ExtentMap:
        return self._get(inode_id).emap

    def version(self, inode_id: int) -> int:
        return self._get(inode_id).emap.version

    def exists(self, inode_id: int) -> bool:
        return inode_id in self._inodes

    def is_deleted(self, inode_id: int) -> bool:
        ino = self._inodes.get(inode_id)
        return ino is None or ino.deleted

    def lookup(self, name: str) -> int:
        try:
            return self._names[name]
        except KeyError:
            raise UnknownInode(name) from None

    def inodes(self) -> list[int]:
        return list(self._inodes)

    def refcount(self, inode_id: int) -> int:
        return self._get(inode_id).refcount

    @property
    def free_blocks(self) -> int:
        return self._alloc.free_blocks

    def read(self, inode_id: int, offset: int, length: int) -> bytes:
        """Host-local read through the current mapping."""
        return read_mapped(self.device, self.snapshot(inode_id), offset, length)

    def owner_table(self) -> dict[int, int]:
        """device block -> owning inode, for exclusivity checks."""
        with self._lock:
            table: dict[int, int] = {}
            for ino in self._inodes.values():
                for b in ino.blocks:
                    if b in table:
                        raise AssertionError(f"block {b} owned by {table[b]} and {ino.inode_id}")
                    table[b] = ino.inode_id
            return table

    # -- mutation ----------------------------------------------------------

    def create_file(self, name: str) -> int:
        with self._lock:
            if name in self._names:
                raise DuplicateName(name)
            inode_id = self._next_inode
            self._next_inode += 1
            emap = ExtentMap(inode_id, 1, (), 0, self.block_size)
            self._inodes[inode_id] = _Inode(inode_id, name, emap)
            self._names[name] = inode_id
        self._changed(inode_id, 1)
        return inode_id

    def _allocate(self, n: int) -> list[int]:
        if n > self._alloc.free_blocks:
            raise DeviceFull(f"need {n} blocks, {self._alloc.free_blocks} free")
        got: list[int] = []
        if n > 1 and self.fragment_prob and self._rng.random() < self.fragment_prob:
            first = self._rng.randint(1, n - 1)
            s, k = self._alloc.alloc_run(first)
            got.extend(range(s, s + k))
            # a one-block guard keeps the next piece from being adjacent
            guard = self._alloc.take_block(s + k)
            try:
                got.extend(self._take(n - k))
            finally:
                if guard:
                    self._alloc.free(s + k, 1)
            return got
        return self._take(n)

    def _take(self, n: int) -> list[int]:
        got: list[int] = []
        while n:
            run = self._alloc.alloc_run(n)
            if run is None:
                for b, k in _runs(got):
                    self._alloc.free(b, k)
                raise DeviceFull("device full")
            s, k = run
            got.extend(range(s, s + k))
            n -= k
        return got

    def _publish(self, ino: _Inode, blocks: list[int], file_length: int) -> int:
        version = ino.emap.version + 1
        ino.blocks = blocks
        ino.emap = ExtentMap(ino.inode_id, version, _extents_for(blocks, self.block_size),
                             file_length, self.block_size)
        return version

    def append(self, inode_id: int, data: bytes) -> int:
        if len(data) % self.block_size:
            raise ValueError(f"append of {len(data)} bytes is not block-multiple")
        with self._lock:
            ino = self._get(inode_id)
            if ino.deleted:
                raise UnknownInode(inode_id)
            n = len(data) // self.block_size
            if n == 0:
                return ino.emap.file_length
            new = self._allocate(n)
            bs = self.block_size
            for (dev, k), pos in zip(_runs(new), _positions(_runs(new), bs)):
                self.device.write(dev, data[pos:pos + k * bs])
            length = ino.emap.file_length + len(data)
            version = self._publish(ino, ino.blocks + new, length)
        self._changed(inode_id, version)
        return length

    def truncate_and_remap(self, inode_id: int, new_length: int | None = None,
                           relocate: bool = True) -> None:
        """Shrink and/or move a file's blocks to fresh device blocks.

        The new mapping (and version) is published before the old blocks
        are freed, so a reader that saw the old version can always detect
        that its mapping went stale.
        """
        with self._lock:
            ino = self._get(inode_id)
            old_len = ino.emap.file_length
            if new_length is None:
                new_length = old_len
            if new_length > old_len or new_length % self.block_size:
                raise ValueError(f"bad truncate length {new_length}")
            keep = new_length // self.block_size
            old = ino.blocks
            if relocate and keep:
                fresh = self._allocate(keep)
                bs = self.block_size
                kept = old[:keep]
                data = b"".join(self.device.read(b, k) for b, k in _runs(kept))
                for (dev, k), pos in zip(_runs(fresh), _positions(_runs(fresh), bs)):
                    self.device.write(dev, data[pos:pos + k * bs])
                version = self._publish(ino, fresh, new_length)
                released = old
            else:
                version = self._publish(ino, old[:keep], new_length)
                released = old[keep:]
            for b, k in _runs(sorted(released)):
                self._alloc.free(b, k)
        self._changed(inode_id, version)

    def delete_file(self, inode_id: int) -> None:
        with self._lock:
            ino = self._get(inode_id)
            if ino.deleted:
                raise UnknownInode(inode_id)
            ino.deleted = True
            if ino.name is not None:
                self._names.pop(ino.name, None)
            if ino.refcount == 0:
                self._reclaim(ino)

    def _reclaim(self, ino: _Inode) -> None:
        for b, k in _runs(sorted(ino.blocks)):
            self._alloc.free(b, k)
        ino.blocks = []
        del self._inodes[ino.inode_id]
        log.debug("reclaimed inode %d", ino.inode_id)

    def open(self, inode_id: int) -> InodeRef:
        with self._lock:
            ino = self._get(inode_id)
            if ino.deleted:
                raise UnknownInode(inode_id)
            ino.refcount += 1
        return InodeRef(self, inode_id)

    def _release(self, inode_id: int) -> None:
        with self._lock:
            ino = self._inodes.get(inode_id)
            if ino is None:
                return
            ino.refcount -= 1
            if ino.refcount == 0 and ino.deleted:
                self._reclaim(ino)


def _positions(runs, bs):
    pos = 0
    for _, k in runs:
        yield pos
        pos += k * bs
