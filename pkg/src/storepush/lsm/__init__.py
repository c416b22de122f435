"""LSM-tree key-value store with split (cache, then pushdown) point reads."""

from .cache import BlockCache, SamplingPolicy
from .store import (Answer, CacheOutcome, CacheResult, FileSet, LsmOptions, LsmStats, LsmStore,
                    SstFile, TraversalPlan)

__all__ = ["Answer", "BlockCache", "CacheOutcome", "CacheResult", "FileSet", "LsmOptions",
           "LsmStats", "LsmStore", "SamplingPolicy", "SstFile", "TraversalPlan"]
