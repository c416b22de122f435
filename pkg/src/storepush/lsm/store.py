"""Leveled LSM-tree store whose point reads are split into an in-memory phase
and one pushed-down chain over the remaining uncached SST blocks.
"""

from __future__ import annotations

import bisect
import enum
import logging
import threading
from dataclasses import dataclass, field

from ..functions import SST_CHAIN
from ..functions.sst import (RESULT_NOT_FOUND, RESULT_VALUE, STAGE_DATA, STAGE_INDEX,
                             SstPlanEntry, decode_result, plan_scratch)
from ..host import FileHandle, HostClient, Outcome
from ..sstable import (DATA_BLOCK_SIZE, BlockHandle, BloomFilter, block_entries, block_get,
                       build_table, entry_size, index_lookup)
from ..wire import MAX_FDS
from .cache import BlockCache, SamplingPolicy

log = logging.getLogger(__name__)


@dataclass
class LsmOptions:
    memtable_bytes: int = 64 * 1024
    l0_compaction_trigger: int = 4
    level_ratio: int = 10
    base_level_bytes: int = 256 * 1024
    target_file_bytes: int = 64 * 1024
    max_levels: int = 7
    data_block_size: int = DATA_BLOCK_SIZE
    pin_index_blocks: bool = True
    bloom_bits_per_key: int | None = None
    cache_bytes: int = 8 << 20
    cache_data_blocks: bool = True
    # what a completed pushdown leaves in the cache: "final" remembers the
    # returned value for its key and file, "none" caches nothing
    pushdown_cache: str = "final"
    pushdown: bool = True
    sampling_rate: float = 0.01
    seed: int | None = None
    max_key_bytes: int = 256
    max_value_bytes: int = 1024
    scratch_size: int = 0  # minimum; grown to fit the plan and the largest value


@dataclass(frozen=True)
class SstFile:
    inode_id: int
    number: int
    level: int
    min_key: bytes
    max_key: bytes
    index_handle: BlockHandle
    filter_handle: BlockHandle | None
    data_handles: tuple[BlockHandle, ...]
    file_length: int
    entry_count: int
    max_value_len: int = 0
    index_block: bytes | None = field(default=None, repr=False, compare=False)
    bloom: BloomFilter | None = field(default=None, repr=False, compare=False)

    def covers(self, key: bytes) -> bool:
        return self.min_key <= key <= self.max_key


@dataclass(frozen=True)
class FileSet:
    """One immutable generation of the level structure (L0 newest first)."""

    levels: tuple[tuple[SstFile, ...], ...]

    def candidates(self, key: bytes) -> list[SstFile]:
        out = [f for f in self.levels[0] if f.covers(key)]
        for files in self.levels[1:]:
            if not files:
                continue
            i = bisect.bisect_right([f.min_key for f in files], key) - 1
            if i >= 0 and files[i].covers(key):
                out.append(files[i])
        return out

    def level_bytes(self, level: int) -> int:
        return sum(f.file_length for f in self.levels[level])

    def all_files(self) -> list[SstFile]:
        return [f for lvl in self.levels for f in lvl]

    def manifest(self) -> list[tuple[int, int, bytes, bytes]]:
        return [(f.level, f.inode_id, f.min_key, f.max_key) for f in self.all_files()]


class CacheOutcome(enum.Enum):
    FOUND_VALUE = "found_value"
    FOUND_NOTHING = "found_nothing"
    NEEDS_IO = "needs_io"
    FILTERED_OUT = "filtered_out"


@dataclass(frozen=True)
class CacheResult:
    kind: CacheOutcome
    value: bytes | None = None  # None with FOUND_VALUE means a tombstone
    stage: int | None = None
    offset: int = 0
    length: int = 0


@dataclass(frozen=True)
class Answer:
    found: bool
    value: bytes | None = None

    @property
    def result(self) -> bytes | None:
        return self.value if self.found else None


NOT_FOUND = Answer(False)


@dataclass
class TraversalPlan:
    entries: list[SstPlanEntry]
    files: list[SstFile]
    local: Answer | None  # set when the in-memory phase settled the query
    after: Answer = NOT_FOUND  # answer if every planned block misses
    touched: list = field(default_factory=list)  # deferred cache accounting


@dataclass
class LsmStats:
    gets: int = 0
    memtable_hits: int = 0
    local_answers: int = 0
    pushdowns: int = 0
    pushdown_ok: int = 0
    sampled: int = 0
    baseline_reads: int = 0
    fallbacks: int = 0
    retries: int = 0
    mismatches: int = 0
    function_fallbacks: int = 0
    flushes: int = 0
    compactions: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


class _GetQuery:
    def __init__(self, db: LsmStore, key: bytes, files, handles):
        self.db, self.key, self.files, self.handles = db, key, files, handles

    def run_fallback(self, client: HostClient) -> Answer:
        return self.db._read_path(self.key, self.files, self.handles)


class LsmStore:
    def __init__(self, client: HostClient, options: LsmOptions | None = None, name: str = "db"):
        self.client = client
        self.store = client.store
        self.opts = options or LsmOptions()
        if self.opts.pushdown_cache not in ("final", "none"):
            raise ValueError("pushdown_cache must be 'final' or 'none'")
        self.name = name
        self.cache = BlockCache(self.opts.cache_bytes)
        self.sampling = SamplingPolicy(self.opts.sampling_rate, self.opts.seed)
        self.stats = LsmStats()
        self._stats_lock = threading.Lock()
        self._state = threading.Lock()
        self._write = threading.RLock()
        self._mem: dict[bytes, bytes | None] = {}
        self._mem_bytes = 0
        self._imm: dict[bytes, bytes | None] | None = None
        self._files = FileSet(tuple(() for _ in range(self.opts.max_levels)))
        self._next_number = 1
        self._compact_ptr: dict[int, bytes] = {}

    def _count(self, **kw) -> None:
        with self._stats_lock:
            for k, v in kw.items():
                setattr(self.stats, k, getattr(self.stats, k) + v)

    @property
    def files(self) -> FileSet:
        return self._files

    # -- writes ---------------------------------------------------------------------

    def put(self, key: bytes, value: bytes) -> None:
        self._apply(key, value)

    def delete(self, key: bytes) -> None:
        self._apply(key, None)

    def _apply(self, key: bytes, value: bytes | None) -> None:
        if not 0 < len(key) <= self.opts.max_key_bytes:
            raise ValueError("key size out of bounds")
        if value is not None and len(value) > self.opts.max_value_bytes:
            raise ValueError("value size out of bounds")
        with self._write:
            self._mem[key] = value
            self._mem_bytes += entry_size(key, value)
            if self._mem_bytes >= self.opts.memtable_bytes:
                self.flush()

    def flush(self) -> None:
        with self._write:
            if not self._mem:
                return
            with self._state:
                self._imm, self._mem = self._mem, {}
                self._mem_bytes = 0
            items = sorted(self._imm.items())
            f = self._write_table(items, 0)
            with self._state:
                levels = list(self._files.levels)
                levels[0] = (f,) + levels[0]
                self._files = FileSet(tuple(levels))
                self._imm = None
            self._count(flushes=1)
            self.client.syncer.kick()
            self._maybe_compact()

    def _write_table(self, items, level: int) -> SstFile:
        bs = self.store.block_size
        t = build_table(items, bs, self.opts.data_block_size, self.opts.bloom_bits_per_key)
        number = self._next_number
        self._next_number += 1
        inode = self.store.create_file(f"{self.name}/{number:06d}.sst")
        self.store.append(inode, t.image)
        vmax = max((len(v) for _, v in items if v is not None), default=0)
        return SstFile(inode, number, level, t.min_key, t.max_key, t.index_handle,
                       t.filter_handle, tuple(t.data_handles), len(t.image), t.entry_count,
                       vmax, t.index_block if self.opts.pin_index_blocks else None, t.filter)

    def ingest_file(self, items, level: int) -> SstFile:
        """Write sorted ``(key, value_or_None)`` pairs as one file straight into ``level``.

        Bulk-load path; also lets tests lay out exact level shapes.
        """
        items = list(items)
        with self._write:
            if not 0 <= level < self.opts.max_levels:
                raise ValueError("no such level")
            f = self._write_table(items, level)
            with self._state:
                levels = list(self._files.levels)
                if level == 0:
                    levels[0] = (f,) + levels[0]
                else:
                    if any(not (g.max_key < f.min_key or g.min_key > f.max_key)
                           for g in levels[level]):
                        self.store.delete_file(f.inode_id)
                        raise ValueError(f"file overlaps an existing file in level {level}")
                    levels[level] = tuple(sorted(levels[level] + (f,), key=lambda g: g.min_key))
                self._files = FileSet(tuple(levels))
            self.client.syncer.kick()
            return f

    # -- compaction -----------------------------------------------------------------

    def _max_bytes(self, level: int) -> int:
        return self.opts.base_level_bytes * self.opts.level_ratio ** (level - 1)

    def _maybe_compact(self) -> None:
        while True:
            fs = self._files
            if len(fs.levels[0]) >= self.opts.l0_compaction_trigger:
                self._compact(0, list(fs.levels[0]))
                continue
            for lvl in range(1, self.opts.max_levels - 1):
                if fs.level_bytes(lvl) > self._max_bytes(lvl):
                    self._compact(lvl, [self._pick(lvl, fs.levels[lvl])])
                    break
            else:
                return

    def _pick(self, level: int, files) -> SstFile:
        ptr = self._compact_ptr.get(level)
        for f in files:
            if ptr is None or f.min_key > ptr:
                return f
        return files[0]

    def compact_all(self) -> None:
        """Flush and push everything into the last non-empty level."""
        with self._write:
            self.flush()
            for lvl in range(self.opts.max_levels - 1):
                fs = self._files
                if not fs.levels[lvl]:
                    continue
                if not any(fs.levels[lvl + 1:]):
                    self._compact(lvl, list(fs.levels[lvl]), output_level=lvl + 1 if lvl == 0
                                  else lvl)
                    break
                self._compact(lvl, list(fs.levels[lvl]))

    def _read_table(self, f: SstFile):
        for h in f.data_handles:
            yield from block_entries(self.store.read(f.inode_id, h.offset, h.length))

    def _compact(self, level: int, inputs: list[SstFile], output_level: int | None = None) -> None:
        with self._write:
            out_level = level + 1 if output_level is None else output_level
            lo = min(f.min_key for f in inputs)
            hi = max(f.max_key for f in inputs)
            fs = self._files
            overlap = [] if out_level == level else [
                f for f in fs.levels[out_level] if not (f.max_key < lo or f.min_key > hi)]
            merged: dict[bytes, bytes | None] = {}
            # newer sources first: inputs are newest-first within L0
            for f in inputs + overlap:
                for k, v in self._read_table(f):
                    merged.setdefault(k, v)
            bottom = not any(fs.levels[out_level + 1:])
            items = sorted((k, v) for k, v in merged.items() if not (bottom and v is None))
            outputs = []
            chunk, size = [], 0
            for k, v in items:
                chunk.append((k, v))
                size += entry_size(k, v)
                if size >= self.opts.target_file_bytes:
                    outputs.append(self._write_table(chunk, out_level))
                    chunk, size = [], 0
            if chunk:
                outputs.append(self._write_table(chunk, out_level))
            dead = {f.inode_id for f in inputs + overlap}
            with self._state:
                levels = list(self._files.levels)
                levels[level] = tuple(f for f in levels[level] if f.inode_id not in dead)
                kept = [f for f in levels[out_level] if f.inode_id not in dead]
                levels[out_level] = tuple(sorted(kept + outputs, key=lambda f: f.min_key))
                self._files = FileSet(tuple(levels))
            if level:
                self._compact_ptr[level] = hi
            for inode in dead:
                self.store.delete_file(inode)
                self.cache.evict_inode(inode)
            self._count(compactions=1)
            self.client.syncer.kick()

    # -- reads ------------------------------------------------------------------------

    def cache_get(self, f: SstFile, key: bytes, touched: list | None = None) -> CacheResult:
        """Answer from cached blocks of one file without any I/O.

        With ``touched`` the cache is only peeked and every lookup is
        appended there for a later :meth:`BlockCache.touch`.
        """
        if f.bloom is not None and not f.bloom.may_contain(key):
            return CacheResult(CacheOutcome.FILTERED_OUT)
        cache = self.cache
        if touched is None:
            hit, value = cache.get_row(f.inode_id, key)
        else:
            hit, value = cache.peek_row(f.inode_id, key)
            if hit:
                touched.append((f.inode_id, key, True))
        if hit:
            return CacheResult(CacheOutcome.FOUND_VALUE, value=value)

        def block(offset):
            if touched is None:
                return cache.get(f.inode_id, offset)
            b = cache.peek(f.inode_id, offset)
            touched.append((f.inode_id, offset, b is not None))
            return b

        index = f.index_block
        if index is None:
            index = block(f.index_handle.offset)
            if index is None:
                h = f.index_handle
                return CacheResult(CacheOutcome.NEEDS_IO, stage=STAGE_INDEX, offset=h.offset,
                                   length=h.length)
        h = index_lookup(index, key)
        if h is None:
            return CacheResult(CacheOutcome.FOUND_NOTHING)
        data = block(h.offset)
        if data is None:
            return CacheResult(CacheOutcome.NEEDS_IO, stage=STAGE_DATA, offset=h.offset,
                               length=h.length)
        found, value = block_get(data, key)
        if found:
            return CacheResult(CacheOutcome.FOUND_VALUE, value=value)
        return CacheResult(CacheOutcome.FOUND_NOTHING)

    def build_plan(self, key: bytes, candidates: list[SstFile] | None = None,
                   defer_touch: bool = False) -> TraversalPlan:
        """Run the in-memory phase over every candidate file, top level first.

        Files answered from cache with "absent" or rejected by their filter
        are skipped. The first cached hit ends the plan: levels below it can
        never win, and the hit is the answer if all planned blocks miss.

        With ``defer_touch`` cache recency and hit counts are left alone and
        collected in ``plan.touched``, so a request that then takes the
        ordinary read path leaves the cache exactly as that path would.
        """
        if candidates is None:
            candidates = self._files.candidates(key)
        touched = [] if defer_touch else None
        entries: list[SstPlanEntry] = []
        files: list[SstFile] = []
        after = NOT_FOUND
        for f in candidates:
            r = self.cache_get(f, key, touched)
            if r.kind is CacheOutcome.FOUND_VALUE:
                after = Answer(True, r.value)
                break
            if r.kind is CacheOutcome.NEEDS_IO:
                entries.append(SstPlanEntry(len(files), r.stage, r.offset, r.length))
                files.append(f)
        touched = touched or []
        if not entries:
            return TraversalPlan([], [], after, touched=touched)
        return TraversalPlan(entries, files, None, after, touched)

    def _snapshot(self, key: bytes):
        """Memtable answer, or the candidate files with references held."""
        with self._state:
            if key in self._mem:
                return Answer(True, self._mem[key]), None, None
            if self._imm is not None and key in self._imm:
                return Answer(True, self._imm[key]), None, None
            cands = self._files.candidates(key)
            handles = {f.inode_id: self.client.open(f.inode_id) for f in cands}
        return None, cands, handles

    def get(self, key: bytes, mode: str | None = None) -> bytes | None:
        return self.lookup(key, mode).result

    def lookup(self, key: bytes, mode: str | None = None) -> Answer:
        pushdown = self.opts.pushdown if mode is None else mode == "pushdown"
        self._count(gets=1)
        mem, cands, handles = self._snapshot(key)
        if mem is not None:
            self._count(memtable_hits=1)
            return mem
        try:
            if not pushdown:
                self._count(baseline_reads=1)
                return self._read_path(key, cands, handles)
            return self._pushdown_get(key, cands, handles)
        finally:
            for h in handles.values():
                h.close()

    def _pushdown_get(self, key: bytes, cands, handles) -> Answer:
        for attempt in range(2):
            plan = self.build_plan(key, cands, defer_touch=True)
            if plan.local is not None:
                self.cache.touch(plan.touched)
                self._count(local_answers=1)
                return plan.local
            if attempt == 0 and self.sampling.sample():
                self._count(sampled=1)
                return self._read_path(key, cands, handles)
            self.cache.touch(plan.touched)
            if len(plan.files) > MAX_FDS:
                break
            scratch = plan_scratch(key, plan.entries, self._scratch_size(key, plan))
            first = plan.entries[0]
            res = self.client.read_pushdown([handles[f.inode_id] for f in plan.files],
                                            first.offset, first.length, SST_CHAIN, scratch,
                                            first_fd=first.fd_index)
            self._count(pushdowns=1)
            if res.outcome is Outcome.OK:
                self._count(pushdown_ok=1)
                r = decode_result(res.scratch, res.result_len)
                if r.status == RESULT_NOT_FOUND:
                    return plan.after
                if self.opts.pushdown_cache == "final":
                    self.cache.insert_row(plan.files[r.fd_index].inode_id, key, r.value)
                return Answer(True, r.value if r.status == RESULT_VALUE else None)
            if res.outcome is Outcome.FALLBACK:
                self._count(function_fallbacks=1)
                break
            self._count(mismatches=1)
            if res.reason not in ("pre_check", "post_check", "target_mismatch"):
                break
            if attempt == 0:
                self._count(retries=1)
                if res.reason == "pre_check":
                    self.client.await_synced([handles[f.inode_id] for f in plan.files])
        self._count(fallbacks=1)
        return self.client.fallback_read_path(_GetQuery(self, key, cands, handles))

    def _scratch_size(self, key: bytes, plan: TraversalPlan) -> int:
        need = 8 + len(key) + 14 * len(plan.entries)
        vmax = max(f.max_value_len for f in plan.files)
        return max(self.opts.scratch_size, need, 6 + vmax)

    def _read_path(self, key: bytes, cands, handles: dict[int, FileHandle]) -> Answer:
        """The ordinary read path: block by block, caching what it reads."""
        read = self.client.read_remote
        for f in cands:
            if f.bloom is not None and not f.bloom.may_contain(key):
                continue
            fh = handles[f.inode_id]
            index = f.index_block
            if index is None:
                ih = f.index_handle
                index = self.cache.get(f.inode_id, ih.offset)
                if index is None:
                    index = read(fh, ih.offset, ih.length)
                    self.cache.insert(f.inode_id, ih.offset, index)
            h = index_lookup(index, key)
            if h is None:
                continue
            data = self.cache.get(f.inode_id, h.offset)
            if data is None:
                data = read(fh, h.offset, h.length)
                if self.opts.cache_data_blocks:
                    self.cache.insert(f.inode_id, h.offset, data)
            found, value = block_get(data, key)
            if found:
                return Answer(True, value)
        return NOT_FOUND

    def dump(self) -> dict[bytes, bytes]:
        """Every live key/value, read host-locally (tests and debugging)."""
        with self._write:
            out: dict[bytes, bytes | None] = {}
            for k, v in self._mem.items():
                out[k] = v
            for f in self._files.all_files():
                for k, v in self._read_table(f):
                    out.setdefault(k, v)
            return {k: v for k, v in sorted(out.items()) if v is not None}
