"""Timing of the vectorised NS block against the per-pixel reference loop."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .ns_block import NsConfig, NsWeights, brute_force_oracle, ns_forward
from .tensor import Tensor


@dataclass
class BenchResult:
    frames: int
    height: int
    width: int
    channels: int
    groups: int
    kernel: int
    fast_s: float
    oracle_s: float
    max_abs_diff: float

    @property
    def speedup(self) -> float:
        return self.oracle_s / self.fast_s

    def summary(self) -> str:
        return (
            f"ns_forward T={self.frames} {self.height}x{self.width} C={self.channels} "
            f"N={self.groups} k={self.kernel}: fast {self.fast_s:.3f}s, oracle {self.oracle_s:.3f}s, "
            f"speedup {self.speedup:.1f}x, max|diff| {self.max_abs_diff:.2e}"
        )


def bench_ns(frames: int = 5, height: int = 32, width: int = 56, channels: int = 32, groups: int = 4,
             kernel: int = 3, dilations=None, seed: int = 0, repeats: int = 1) -> BenchResult:
    """Self-attention over ``frames`` frames (queries = keys = values), best of ``repeats``."""
    if dilations is None:
        dilations = tuple([3, 4] * groups)[:groups]
    cfg = NsConfig(channels=channels, groups=groups, kernel=kernel, dilations=tuple(dilations))
    rng = np.random.default_rng(seed)
    weights = NsWeights(rng, cfg)
    x = Tensor(rng.normal(size=(frames, height, width, channels)))

    fast = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        y = ns_forward(x, x, x, cfg, weights).data
        fast.append(time.perf_counter() - t0)
    t0 = time.perf_counter()
    ref = brute_force_oracle(x, x, x, cfg, weights)
    oracle = time.perf_counter() - t0
    return BenchResult(frames, height, width, channels, groups, kernel, min(fast), oracle,
                       float(np.abs(y - ref).max()))
