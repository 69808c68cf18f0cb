"""Central finite-difference check of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Model, ModelSpec
from .ops import mse_loss


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def lines(self) -> list[str]:
        out = [f"{name:40s} {err:.3e} {'ok' if err < self.tolerance else 'FAIL'}"
               for name, err in self.errors.items()]
        out.append(f"max relative error {self.max_error:.3e} (tolerance {self.tolerance:g}): "
                   f"{'PASS' if self.passed else 'FAIL'}")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """max|a - n| scaled by the larger of the two gradients' max magnitude.

    The scale never drops below ``floor``: near a minimum the central
    difference keeps an O(step^2) residue that would otherwise read as a
    100% error against an exactly zero analytic gradient.
    """
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def _loss(model, x, target, train):
    return mse_loss(model.forward(x, train), target)[0]


def gradient_check(model: Model, x: np.ndarray, target: np.ndarray, step: float = 1e-6,
                   tolerance: float = 1e-5, train: bool = True,
                   include_input: bool = True) -> GradCheckReport:
    """Compare backprop against central differences for every parameter tensor.

    The model must be float64.  Each element ``w`` is perturbed by
    ``step * max(1, |w|)``.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient check requires a float64 model")
    x = np.asarray(x, dtype=np.float64)
    loss, dpred = mse_loss(model.forward(x, train), target)
    dx = model.backward(dpred)
    analytic = {k: v.copy() for k, v in model.grads.items()}
    report = GradCheckReport(tolerance=tolerance)
    for name, w in model.params.items():
        num = np.zeros_like(w)
        flat, gflat = w.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            lp = _loss(model, x, target, train)
            flat[i] = orig - h
            lm = _loss(model, x, target, train)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * h)
        report.errors[name] = relative_error(analytic[name], num)
    if include_input:
        num = np.zeros_like(x)
        flat, gflat = x.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            lp = _loss(model, x, target, train)
            flat[i] = orig - h
            lm = _loss(model, x, target, train)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * h)
        report.errors["input"] = relative_error(dx.reshape(x.shape), num)
    return report


def default_check(seed: int = 0, size: int = 8, batch: int = 2, tolerance: float = 1e-5) -> GradCheckReport:
    """Gradient check of the two-block tiny model on random ``size`` x ``size`` inputs."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec.tiny(out_channels=52)
    model = Model(spec, seed=seed, dtype=np.float64)
    # non-trivial affine parameters so every path carries gradient
    for name, w in model.params.items():
        if name.endswith("gamma"):
            w[...] = rng.uniform(0.5, 1.5, w.shape)
        elif name.endswith("beta") or name.endswith(".b"):
            w[...] = rng.normal(0, 0.1, w.shape)
    model.output_scale[...] = rng.uniform(0.5, 2.0, model.output_scale.shape)
    x = rng.uniform(0, 1, (batch, 1, size, size))
    target = rng.normal(0, 1, (batch, spec.out_channels))
    return gradient_check(model, x, target, tolerance=tolerance)
