"""Latency benchmark harness: batch size 1, optional BN folding, fixed seed."""
from __future__ import annotations

import csv
import os
import platform
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .builder import build_model
from .config import ModelConfig
from .runtime import InferenceSession, fold_batchnorm
from .weights import init_random


def default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


@dataclass
class BenchReport:
    model: str
    input_dims: tuple
    iters: int
    warmup: int
    times_ms: List[float]
    fold_bn: bool
    threads: int
    node_count: int = 0
    machine: str = field(default_factory=lambda: f"{platform.machine()} {platform.processor()}".strip())

    @property
    def mean(self) -> float:
        return float(np.mean(self.times_ms))

    @property
    def median(self) -> float:
        return float(np.median(self.times_ms))

    @property
    def p95(self) -> float:
        return float(np.percentile(self.times_ms, 95))

    @property
    def cv(self) -> float:
        """Coefficient of variation (sample std / mean)."""
        if len(self.times_ms) < 2:
            return 0.0
        return float(np.std(self.times_ms, ddof=1) / np.mean(self.times_ms))

    def summary(self) -> str:
        n, c, h, w = self.input_dims
        return (f"{self.model} @ {h}x{w} fold={self.fold_bn} threads={self.threads}: "
                f"median {self.median:.2f} ms, mean {self.mean:.2f}, p95 {self.p95:.2f}, "
                f"cv {100 * self.cv:.1f}% over {self.iters} iters (+{self.warmup} warmup)")

    def write_csv(self, path) -> None:
        _, _, h, w = self.input_dims
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["model", "input_h", "input_w", "fold", "threads", "iter", "ms"])
            base = [self.model, h, w, int(self.fold_bn), self.threads]
            for i, ms in enumerate(self.times_ms):
                wr.writerow(base + [i, f"{ms:.4f}"])
            wr.writerow(base + ["median", f"{self.median:.4f}"])


def benchmark(cfg: ModelConfig, input_hw: Optional[Sequence[int]] = None, iters: int = 30,
              warmup: int = 5, fold_bn: bool = False, threads: Optional[int] = None,
              seed: int = 0) -> BenchReport:
    """Time ``iters`` forward passes after ``warmup`` untimed ones.

    Build, initialization, folding and input generation happen before the
    clock starts; only ``session.run`` is timed.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    h, w = input_hw if input_hw is not None else cfg.input_hw
    threads = threads or default_threads()
    graph = build_model(cfg)
    store = init_random(graph, seed)
    if fold_bn:
        graph, store = fold_batchnorm(graph, store)
    dims = (1, 3, h, w)
    session = InferenceSession(graph, store, dims, threads=threads)
    x = np.random.Generator(np.random.Philox(seed)).standard_normal(dims).astype(np.float32)
    for _ in range(warmup):
        session.run(x)
    times = []
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        session.run(x)
        times.append((time.perf_counter_ns() - t0) / 1e6)
    return BenchReport(cfg.name, dims, iters, warmup, times, fold_bn, threads, len(graph.nodes))
