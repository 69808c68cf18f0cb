"""Aggregate reports: bootstrap metrics, pointwise maps, sector tables, binned whiskers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..vf_domain import SECTORS, RetestCITable, SectorMap, grid_24_2
from .bootstrap import bootstrap_distribution, percentile_interval
from .metrics import MetricError, baseline_mae, mae, pearson_r, r2


@dataclass(frozen=True)
class Estimate:
    value: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class MetricsReport:
    tag: str
    target: str
    n_samples: int
    r2: Estimate
    pearson_r: Estimate
    mae: Estimate
    baseline_mae: float
    sqrt_r2: float = float("nan")
    mean_point_r: float = float("nan")


def evaluate(measured, predicted, target: str = "thresholds", tag: str = "model",
             iterations: int = 5000, level: float = 0.95, seed: int = 0) -> MetricsReport:
    """Point estimates plus exam-level percentile bootstrap intervals."""
    y = np.asarray(measured, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if y.shape != p.shape:
        raise MetricError(f"{y.shape[0]} measured rows vs {p.shape[0]} predicted rows"
                          if y.ndim and p.ndim else "shape mismatch")
    if y.ndim == 1:
        y, p = y[:, None], p[:, None]
    ests = {}
    for name, fn in (("r2", r2), ("pearson_r", pearson_r), ("mae", mae)):
        point = fn(y, p)
        if iterations > 0:
            lo, hi = percentile_interval(bootstrap_distribution(fn, y, p, iterations, seed), level)
        else:
            lo = hi = float("nan")
        ests[name] = Estimate(point, lo, hi)
    extra = {}
    if y.shape[1] > 1:
        extra["sqrt_r2"] = math.sqrt(ests["r2"].value) if ests["r2"].value > 0 else float("nan")
        pm = pointwise_r_map(y, p)
        extra["mean_point_r"] = float(np.nanmean(pm.values)) if np.isfinite(pm.values).any() else float("nan")
    return MetricsReport(tag, target, int(y.shape[0]), baseline_mae=baseline_mae(y), **ests, **extra)


@dataclass(frozen=True)
class PointwiseMap:
    values: np.ndarray          # 52 Pearson r values, NaN where undefined
    coords: np.ndarray          # (52, 2) OD grid coordinates

    @property
    def undefined(self) -> np.ndarray:
        return ~np.isfinite(self.values)


def pointwise_r_map(measured, predicted) -> PointwiseMap:
    y = np.asarray(measured, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 2:
        raise MetricError("pointwise map needs two equally shaped (exams, points) matrices")
    if y.shape[0] < 2:
        raise MetricError("pointwise map needs at least two exams")
    vals = np.full(y.shape[1], np.nan)
    for k in range(y.shape[1]):
        try:
            vals[k] = pearson_r(y[:, k], p[:, k])
        except MetricError:
            pass
    return PointwiseMap(vals, grid_24_2().active_coords())


@dataclass(frozen=True)
class SectorRow:
    sector: str
    n_points: int
    r2: float
    pearson_r: float
    mae: float
    mae_baseline: float


def _or_nan(fn, *args):
    try:
        return fn(*args)
    except MetricError:
        return float("nan")


def sector_metrics(measured, predicted, sector_map: SectorMap) -> list[SectorRow]:
    """Metrics pooled over (exam, point) pairs inside each sector, in the fixed sector order."""
    y = np.asarray(measured, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 2:
        raise MetricError("sector metrics need two equally shaped (exams, points) matrices")
    rows = []
    for s in SECTORS:
        idx = sector_map.indices(s)
        ys, ps = y[:, idx], p[:, idx]
        rows.append(SectorRow(s, len(idx), _or_nan(r2, ys, ps), _or_nan(pearson_r, ys, ps),
                              mae(ys, ps), baseline_mae(ys)))
    return rows


@dataclass(frozen=True)
class BinnedStats:
    edges: np.ndarray
    count: np.ndarray
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    p5: np.ndarray
    p95: np.ndarray
    outside: int = 0

    @property
    def centers(self) -> np.ndarray:
        return (self.edges[:-1] + self.edges[1:]) / 2

    @property
    def populated(self) -> np.ndarray:
        return self.count > 0


def bin_by_measured(measured, predicted, step: float = 2.0, lo: float = 0.0, hi: float = 40.0) -> BinnedStats:
    """Order statistics of predictions per measured-value bin [k*step, (k+1)*step).

    The top edge is closed so a measurement of exactly ``hi`` lands in the last
    bin; values outside [lo, hi] are only counted in ``outside``.
    """
    if step <= 0:
        raise ValueError("bin step must be positive")
    y = np.asarray(measured, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if y.shape != p.shape:
        raise MetricError("measured and predicted differ in size")
    nb = int(round((hi - lo) / step))
    edges = lo + step * np.arange(nb + 1)
    k = np.floor((y - lo) / step).astype(int)
    k[y == hi] = nb - 1
    inside = (y >= lo) & (y <= hi)
    stats = {name: np.full(nb, np.nan) for name in ("median", "q25", "q75", "p5", "p95")}
    count = np.zeros(nb, dtype=int)
    for b in range(nb):
        vals = p[inside & (k == b)]
        count[b] = vals.size
        if vals.size:
            p5, q25, med, q75, p95 = np.percentile(vals, [5, 25, 50, 75, 95])
            stats["p5"][b], stats["q25"][b], stats["median"][b] = p5, q25, med
            stats["q75"][b], stats["p95"][b] = q75, p95
    return BinnedStats(edges, count, outside=int((~inside).sum()), **stats)


def retest_coverage(binned: BinnedStats, ci: RetestCITable) -> tuple[int, int, float]:
    """Count p5/p95 whisker ends of populated bins inside the retest CI at the bin centre."""
    inside = total = 0
    for b in np.flatnonzero(binned.populated):
        lower, upper = ci.row_for(float(binned.centers[b]))
        for v in (binned.p5[b], binned.p95[b]):
            total += 1
            inside += int(lower <= v <= upper)
    return inside, total, (inside / total if total else float("nan"))
