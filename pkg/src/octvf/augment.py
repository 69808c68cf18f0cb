"""Preprocessing and seeded training-time augmentation.

Every random operation takes an explicit seed; :func:`stream_seed` derives
one per (global seed, sample, epoch) so a sample's augmentation does not
depend on which other samples were drawn before it.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .vf_domain import VFExam, mirror_exam


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    flip_labels: bool = True
    elastic_alpha: float = 8.0
    elastic_sigma: float = 6.0
    cutout_fraction: float = 0.25
    global_seed: int = 0
    enabled: bool = True

    def __post_init__(self):
        vals = (self.hflip_prob, self.elastic_alpha, self.elastic_sigma, self.cutout_fraction)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("augmentation parameters must be finite")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if self.elastic_alpha < 0 or self.elastic_sigma <= 0:
            raise ValueError("elastic_alpha must be >= 0 and elastic_sigma > 0")
        if not 0 < self.cutout_fraction < 1:
            raise ValueError(f"cutout_fraction must be in (0, 1), got {self.cutout_fraction}")

    def to_dict(self) -> dict:
        return asdict(self)


def stream_seed(global_seed: int, sample_id: str | int, epoch: int) -> int:
    """64-bit seed from (global seed, sample id, epoch)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<qq", int(global_seed), int(epoch)))
    h.update(str(sample_id).encode())
    return int.from_bytes(h.digest(), "little")


def normalize_intensity(raw: np.ndarray, lo: float, hi: float):
    """Rescale ``raw`` linearly so ``lo -> 0`` and ``hi -> 1``, clamped to [0, 1]."""
    from .oct_ingest import RasterImage

    if not hi > lo:
        raise ValueError(f"intensity range needs max > min, got [{lo}, {hi}]")
    v = (np.asarray(raw, dtype=np.float64) - lo) / (hi - lo)
    return RasterImage(np.clip(v, 0.0, 1.0).astype(np.float32))


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, clamped to the valid sample range
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, (src - i0).astype(np.float64)


def resize_bilinear(image: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize of a 2-D array (or a RasterImage's pixels) to ``out_h`` x ``out_w``."""
    img = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be at least 1x1")
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32)
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    rows = img[r0] * (1 - fr)[:, None] + img[r1] * fr[:, None]
    out = rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]
    return np.clip(out, 0, 1).astype(np.float32)


def horizontal_flip(images: Sequence[np.ndarray], target: VFExam | None, config: AugmentConfig):
    """Reverse each image's columns; mirror the VF target when ``flip_labels`` is set."""
    flipped = [np.ascontiguousarray(np.asarray(getattr(im, "pixels", im))[:, ::-1]) for im in images]
    if target is not None and config.flip_labels:
        target = mirror_exam(target)
    return flipped, target


def elastic_deform(image: np.ndarray, alpha: float, sigma: float, seed: int) -> np.ndarray:
    """Smoothed random displacement field (Simard-style), bilinear, edge-clamped."""
    img = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    if alpha < 0 or sigma <= 0:
        raise ValueError("elastic deformation needs alpha >= 0 and sigma > 0")
    if alpha == 0:
        return img.astype(np.float32)
    rng = np.random.default_rng(seed)
    h, w = img.shape
    dy = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="constant") * alpha
    dx = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="constant") * alpha
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = map_coordinates(img, [yy + dy, xx + dx], order=1, mode="nearest")
    return np.clip(out, 0, 1).astype(np.float32)


def cutout(image: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Zero one square of side ``round(fraction * min(h, w))`` placed fully inside the image."""
    img = np.array(getattr(image, "pixels", image), dtype=np.float32)
    if not 0 < fraction < 1:
        raise ValueError(f"cutout fraction must be in (0, 1), got {fraction}")
    h, w = img.shape
    side = int(round(fraction * min(h, w)))
    if side == 0:
        return img
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    img[top:top + side, left:left + side] = 0
    return img


def augment(images: Sequence[np.ndarray], target: VFExam | None, config: AugmentConfig, seed: int):
    """Flip (with probability ``hflip_prob``), elastic deformation, then cutout."""
    if not config.enabled:
        return [np.asarray(getattr(im, "pixels", im), dtype=np.float32) for im in images], target
    rng = np.random.default_rng(seed)
    flip = rng.random() < config.hflip_prob
    sub = rng.integers(0, 2**63, size=(len(images), 2))
    imgs = list(images)
    if flip:
        imgs, target = horizontal_flip(imgs, target, config)
    out = []
    for im, (s_el, s_cut) in zip(imgs, sub):
        im = elastic_deform(im, config.elastic_alpha, config.elastic_sigma, int(s_el))
        out.append(cutout(im, config.cutout_fraction, int(s_cut)))
    return out, target
