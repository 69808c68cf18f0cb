"""Regression metrics.  Matrix inputs are pooled over every (exam, point) pair."""

from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


def _pair(measured, predicted, min_n=1):
    y = np.asarray(measured, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if np.shape(measured) != np.shape(predicted):
        raise MetricError(f"shape mismatch: {np.shape(measured)} vs {np.shape(predicted)}")
    if y.size < min_n:
        raise MetricError(f"need at least {min_n} values, got {y.size}")
    return y, p


def r2(measured, predicted) -> float:
    """Coefficient of determination 1 - SS_res / SS_tot."""
    y, p = _pair(measured, predicted, 2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise MetricError("R2 undefined: measured values have zero variance")
    return float(1.0 - np.sum((y - p) ** 2) / ss_tot)


def pearson_r(measured, predicted) -> float:
    y, p = _pair(measured, predicted, 2)
    yc, pc = y - y.mean(), p - p.mean()
    denom = np.sqrt(np.sum(yc * yc) * np.sum(pc * pc))
    if denom == 0:
        raise MetricError("Pearson r undefined: an input has zero variance")
    return float(np.clip(np.sum(yc * pc) / denom, -1.0, 1.0))


def mae(measured, predicted) -> float:
    y, p = _pair(measured, predicted, 1)
    return float(np.mean(np.abs(y - p)))


def mse(measured, predicted) -> float:
    y, p = _pair(measured, predicted, 1)
    return float(np.mean((y - p) ** 2))


def baseline_mae(measured) -> float:
    """MAE of always predicting the mean of ``measured``."""
    y = np.asarray(measured, dtype=np.float64).ravel()
    if y.size == 0:
        raise MetricError("baseline MAE of an empty set")
    return float(np.mean(np.abs(y - y.mean())))


METRICS = {"r2": r2, "pearson": pearson_r, "mae": mae}
