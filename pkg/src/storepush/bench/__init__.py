"""Workload generation and measurement harness."""

from .runner import CacheConfig, Metrics, RemoteTarget, run, sweep_sampling
from .workload import MIXES, Op, WorkloadSpec, ZipfianGenerator, generate, load_trace

__all__ = ["CacheConfig", "MIXES", "Metrics", "Op", "RemoteTarget", "WorkloadSpec",
           "ZipfianGenerator", "generate", "load_trace", "run", "sweep_sampling"]
