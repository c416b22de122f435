"""Seeded YCSB-style operation streams and CSV trace replay."""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass
from typing import Iterator

READ, UPDATE, INSERT, RMW = "read", "update", "insert", "rmw"

# (read, update, insert, rmw) proportions and default key distribution
MIXES: dict[str, tuple[tuple[float, float, float, float], str]] = {
    "ycsb_a": ((0.5, 0.5, 0.0, 0.0), "zipfian"),
    "ycsb_b": ((0.95, 0.05, 0.0, 0.0), "zipfian"),
    "ycsb_c": ((1.0, 0.0, 0.0, 0.0), "zipfian"),
    "ycsb_d": ((0.95, 0.0, 0.05, 0.0), "latest"),
    "ycsb_f": ((0.5, 0.0, 0.0, 0.5), "zipfian"),
    "uniform_read": ((1.0, 0.0, 0.0, 0.0), "uniform"),
    "uniform_5050": ((0.5, 0.5, 0.0, 0.0), "uniform"),
}
DISTRIBUTIONS = ("zipfian", "uniform", "latest")


@dataclass(frozen=True)
class Op:
    kind: str
    key: int
    value_size: int = 0


@dataclass
class WorkloadSpec:
    mix: str = "ycsb_c"
    distribution: str | None = None  # None: the mix's default
    n_keys: int = 10_000
    n_ops: int = 10_000
    value_size: int = 100
    seed: int = 0
    theta: float = 0.99

    def __post_init__(self):
        if self.mix not in MIXES:
            raise ValueError(f"unknown workload {self.mix!r}; choose from {sorted(MIXES)}")
        if self.distribution is not None and self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.n_keys < 1 or self.n_ops < 0:
            raise ValueError("n_keys must be positive and n_ops non-negative")

    @property
    def dist(self) -> str:
        return self.distribution or MIXES[self.mix][1]

    @property
    def read_only(self) -> bool:
        return MIXES[self.mix][0][0] == 1.0


class ZipfianGenerator:
    """Zipf over ``[0, n)`` with the incremental-zeta method used by YCSB."""

    def __init__(self, n: int, theta: float = 0.99, rng: random.Random | None = None):
        self.rng = rng or random.Random()
        self.theta = theta
        self.alpha = 1.0 / (1.0 - theta)
        self.zeta2 = self._zeta(0, 2, 0.0)
        self.n = 0
        self.zetan = 0.0
        self._grow(n)

    def _zeta(self, start: int, end: int, acc: float) -> float:
        for i in range(start, end):
            acc += 1.0 / (i + 1) ** self.theta
        return acc

    def _grow(self, n: int) -> None:
        self.zetan = self._zeta(self.n, n, self.zetan)
        self.n = n
        self.eta = ((1 - (2.0 / n) ** (1 - self.theta)) / (1 - self.zeta2 / self.zetan)
                    if n > 1 else 0.0)

    def next(self, n: int | None = None) -> int:
        if n is not None and n > self.n:
            self._grow(n)
        u = self.rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < 1.0 + 0.5 ** self.theta:
            return 1
        return min(self.n - 1, int(self.n * (self.eta * u - self.eta + 1) ** self.alpha))


def _fnv64(x: int) -> int:
    h = 0xCBF29CE484222325
    for _ in range(8):
        h ^= x & 0xFF
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        x >>= 8
    return h


def generate(spec: WorkloadSpec) -> Iterator[Op]:
    """The op stream for ``spec``; identical for identical specs."""
    rng = random.Random(spec.seed)
    (p_read, p_update, p_insert, _), _ = MIXES[spec.mix]
    dist = spec.dist
    zipf = ZipfianGenerator(spec.n_keys, spec.theta, rng) if dist != "uniform" else None
    count = spec.n_keys

    def choose() -> int:
        if dist == "uniform":
            return rng.randrange(count)
        if dist == "latest":
            return count - 1 - zipf.next(count)
        # scatter popular ranks over the key space
        return _fnv64(zipf.next()) % spec.n_keys

    for _ in range(spec.n_ops):
        r = rng.random()
        if r < p_read:
            yield Op(READ, choose())
        elif r < p_read + p_update:
            yield Op(UPDATE, choose(), spec.value_size)
        elif r < p_read + p_update + p_insert:
            yield Op(INSERT, count, spec.value_size)
            count += 1
        else:
            yield Op(RMW, choose(), spec.value_size)


def load_trace(path) -> list[Op]:
    """Ops from a CSV with columns ``op,key,value_size`` (header optional)."""
    ops = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or row[0].strip().lower() == "op":
                continue
            kind = row[0].strip().lower()
            if kind not in (READ, UPDATE, INSERT, RMW):
                raise ValueError(f"bad trace op {kind!r}")
            size = int(row[2]) if len(row) > 2 and row[2].strip() else 0
            ops.append(Op(kind, int(row[1]), size))
    return ops
