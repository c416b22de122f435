from __future__ import annotations

import random
import threading
from collections import OrderedDict


_ROW_OVERHEAD = 16
_TOMB = object()


class BlockCache:
    """Byte-bounded LRU cache of SST blocks keyed by ``(inode, offset)``.

    It also holds single-key rows keyed by ``(inode, key)``: the final value
    a pushdown returned for a key, remembered against the file that held it.
    Both kinds share one capacity and one LRU order.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._d: OrderedDict[tuple[int, int], bytes] = OrderedDict()
        self._lock = threading.Lock()
        self.resident = 0
        self.hits = 0
        self.misses = 0
        self.inserts = 0

    def get(self, inode: int, offset: int) -> bytes | None:
        """Cached block, counting a hit or a miss."""
        with self._lock:
            b = self._d.get((inode, offset))
            if b is None:
                self.misses += 1
                return None
            self._d.move_to_end((inode, offset))
            self.hits += 1
            return b

    def peek(self, inode: int, offset: int) -> bytes | None:
        """Lookup without touching LRU order or hit counters."""
        return self._d.get((inode, offset))

    def peek_row(self, inode: int, key: bytes):
        """Like :meth:`get_row` without touching LRU order or hit counters."""
        v = self._d.get((inode, key))
        if v is None:
            return False, None
        return True, None if v is _TOMB else v[0]

    def touch(self, keys) -> None:
        """Account for lookups done with the peek methods.

        ``keys`` holds ``(inode, offset_or_row_key, hit)``; hits move to the
        LRU tail (if still resident) and count as hits, the rest as misses.
        """
        with self._lock:
            for inode, k, hit in keys:
                if not hit:
                    self.misses += 1
                    continue
                self.hits += 1
                if (inode, k) in self._d:
                    self._d.move_to_end((inode, k))

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._d

    def insert(self, inode: int, offset: int, block: bytes) -> None:
        if len(block) > self.capacity:
            return
        with self._lock:
            key = (inode, offset)
            old = self._d.pop(key, None)
            if old is not None:
                self.resident -= self._size(key, old)
            self._d[key] = block
            self.resident += len(block)
            self.inserts += 1
            self._trim()

    def get_row(self, inode: int, key: bytes):
        """``(True, value_or_None)`` on a hit (``None`` is a tombstone), else ``(False, None)``."""
        with self._lock:
            v = self._d.get((inode, key))
            if v is None:
                return False, None
            self._d.move_to_end((inode, key))
            self.hits += 1
            return True, None if v is _TOMB else v[0]

    def insert_row(self, inode: int, key: bytes, value: bytes | None) -> None:
        size = len(key) + (len(value) if value is not None else 0) + _ROW_OVERHEAD
        if size > self.capacity:
            return
        with self._lock:
            k = (inode, key)
            old = self._d.pop(k, None)
            if old is not None:
                self.resident -= self._size(k, old)
            self._d[k] = _TOMB if value is None else (value,)
            self.resident += size
            self.inserts += 1
            self._trim()

    @staticmethod
    def _size(key, v) -> int:
        if isinstance(key[1], int):
            return len(v)
        return len(key[1]) + (0 if v is _TOMB else len(v[0])) + _ROW_OVERHEAD

    def _trim(self) -> None:
        while self.resident > self.capacity:
            k, ev = self._d.popitem(last=False)
            self.resident -= self._size(k, ev)

    def evict_inode(self, inode: int) -> None:
        with self._lock:
            for key in [k for k in self._d if k[0] == inode]:
                self.resident -= self._size(key, self._d.pop(key))

    def clear(self) -> None:
        with self._lock:
            self._d.clear()
            self.resident = 0

    def __len__(self) -> int:
        return len(self._d)

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


class SamplingPolicy:
    """Independent coin flips deciding which reads take the caching path."""

    def __init__(self, rate: float = 0.01, seed: int | None = None):
        if not 0.0 <= rate <= 1.0:
            raise ValueError("rate must be in [0, 1]")
        self.rate = rate
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self.decisions = 0
        self.sampled = 0

    def sample(self) -> bool:
        with self._lock:
            self.decisions += 1
            hit = self.rate >= 1.0 or (self.rate > 0.0 and self._rng.random() < self.rate)
            if hit:
                self.sampled += 1
            return hit

    @property
    def fraction(self) -> float:
        return self.sampled / self.decisions if self.decisions else 0.0
