"""Percentile bootstrap over exams.

A resample draws whole rows, so for threshold targets each draw carries an
exam's full 52-vector and within-exam correlation is preserved.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .metrics import MetricError

MAX_RETRIES = 100


def bootstrap_distribution(statistic: Callable, measured, predicted, iterations: int = 5000,
                           seed: int = 0, max_retries: int = MAX_RETRIES) -> np.ndarray:
    """Statistic evaluated on ``iterations`` paired row resamples.

    A resample on which the statistic is undefined (raises MetricError or
    returns a non-finite value) is redrawn, at most ``max_retries`` times in a
    row before giving up.
    """
    y = np.asarray(measured, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if y.shape != p.shape:
        raise MetricError(f"shape mismatch: {y.shape} vs {p.shape}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    n = y.shape[0]
    if n == 0:
        raise MetricError("bootstrap of an empty sample")
    rng = np.random.default_rng(seed)
    out = np.empty(iterations)
    for it in range(iterations):
        for _ in range(max_retries + 1):
            idx = rng.integers(0, n, n)
            try:
                v = statistic(y[idx], p[idx])
            except MetricError:
                continue
            if np.isfinite(v):
                out[it] = v
                break
        else:
            raise MetricError(f"statistic undefined on {max_retries + 1} consecutive resamples")
    return out


def percentile_interval(dist: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    a = (1 - level) / 2
    lo, hi = np.percentile(dist, [100 * a, 100 * (1 - a)])
    return float(lo), float(hi)


def bootstrap_ci(statistic: Callable, measured, predicted, iterations: int = 5000,
                 level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    dist = bootstrap_distribution(statistic, measured, predicted, iterations, seed)
    return percentile_interval(dist, level)
