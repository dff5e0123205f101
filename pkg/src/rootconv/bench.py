"""Micro-benchmark: many small GEMMs, one call each vs one batched dispatch."""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import gemm, gemm_batched

__all__ = ["BenchResult", "bench_gemm", "STRATEGIES"]

STRATEGIES = ("looped", "batched")


@dataclass
class BenchResult:
    dims: tuple[int, int, int]      # (m, k, n) of every product
    batch: int
    strategy: str
    samples: list[float] = field(default_factory=list)   # seconds per call, one entry per repetition
    checksum: str = ""

    @property
    def reps(self) -> int:
        return len(self.samples)

    @property
    def median(self) -> float:
        return float(np.median(self.samples))

    @property
    def min(self) -> float:
        return float(np.min(self.samples))

    @property
    def macs(self) -> int:
        m, k, n = self.dims
        return self.batch * m * k * n

    @property
    def throughput(self) -> float:
        """Multiply-adds per second at the median time."""
        return self.macs / self.median if self.median > 0 else float("inf")

    def row(self) -> dict:
        m, k, n = self.dims
        return {"m": m, "k": k, "n": n, "batch": self.batch, "strategy": self.strategy, "reps": self.reps,
                "median_s": self.median, "min_s": self.min, "macs_per_s": self.throughput,
                "checksum": self.checksum}


def _run(strategy: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if strategy == "batched":
        return gemm_batched(a, b)
    if strategy == "looped":
        return np.stack([gemm(a[t], b[t]) for t in range(len(a))])
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def bench_gemm(dims: Sequence[int] = (16, 16, 16), batch: int = 64,
               strategies: Sequence[str] = STRATEGIES, reps: int = 5, seed: int = 0,
               inner: int = 10, warmup: int = 1) -> list[BenchResult]:
    """Time each strategy on the same ``batch`` random ``m x k`` by ``k x n`` products.

    One untimed warm-up precedes ``reps`` timed samples; each sample is the
    mean of ``inner`` back-to-back calls.  Strategies run in the given order.
    """
    if reps < 5:
        raise ValueError("at least 5 repetitions are required")
    if len(dims) != 3:
        raise ValueError("dims must be (m, k, n)")
    m, k, n = (int(d) for d in dims)
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((batch, m, k)).astype(np.float32)
    b = rng.standard_normal((batch, k, n)).astype(np.float32)
    results = []
    for s in strategies:
        for _ in range(warmup):
            out = _run(s, a, b)
        res = BenchResult((m, k, n), batch, s)
        for _ in range(reps):
            t0 = time.perf_counter()
            for _ in range(inner):
                out = _run(s, a, b)
            res.samples.append((time.perf_counter() - t0) / inner)
        res.checksum = hashlib.sha256(np.ascontiguousarray(out).tobytes()).hexdigest()
        results.append(res)
    return results
