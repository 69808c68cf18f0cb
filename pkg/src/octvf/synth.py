"""Synthetic OCT-VF exams with a known structure-function law.

Each exam has a damage level in [0, 1] per visual-field sector.  Ring scans
show the nerve-fibre layer as a bright band whose thickness in each column
(column = angle around the disc, TSNIT order starting temporally) shrinks
with the damage of the sector that the angle projects to.  A VF point's
threshold is ``floor + (ceiling - floor) * s(t)`` where ``t = 1 - damage``
of its sector and ``s`` is a logistic curve rescaled so s(0)=0, s(1)=1.

Left eyes are rendered mirrored (reversed columns, flipped SLO) while their
thresholds stay in the anatomical index order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from .oct_ingest import ExamPair, OctRing, RasterImage, RING_DIAMETERS, exam_ids, write_container
from .vf_domain import SECTORS, SectorMap, VFExam, load_sector_map

# disc angle ranges in degrees (OD, 0 = temporal, 90 = superior) -> VF sector they serve
DISC_SECTORS = (
    (-50.0, 40.0, "Central"),
    (40.0, 80.0, "Inferior"),
    (80.0, 120.0, "InferiorNasal"),
    (120.0, 230.0, "Temporal"),
    (230.0, 270.0, "SuperiorNasal"),
    (270.0, 310.0, "Superior"),
)
RING_BASE_FACTOR = {3.5: 1.0, 4.1: 0.9, 4.7: 0.8}

BACKGROUND = 0.08
BAND = 0.85
RPE = 0.6
BAND_ROWS = 0.65  # fraction of the height that contains the band, never the RPE line

DEFAULT_AMPLITUDES = {
    "Central": 0.55, "Temporal": 0.6, "Inferior": 0.9,
    "InferiorNasal": 1.0, "Superior": 0.85, "SuperiorNasal": 1.0,
}


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 300
    exams_per_patient: int = 2
    ring_width: int = 192
    ring_height: int = 128
    slo_size: int = 128
    depth_um: float = 1000.0
    base_thickness_um: float = 110.0
    floor_thickness_um: float = 35.0
    amplitudes: dict = field(default_factory=lambda: dict(DEFAULT_AMPLITUDES))
    ceiling_db: float = 32.0
    floor_db: float = 0.0
    slope: float = 6.0
    midpoint: float = 0.45
    md_reference_db: float = 30.0
    noise_db: float = 1.0
    noise_pixel: float = 0.04
    unreliable_fraction: float = 0.1
    unreliable_noise_factor: float = 3.0
    fixed_damage: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        errors = []
        if self.n_patients < 1 or self.exams_per_patient < 1:
            errors.append("need at least one patient and one exam per patient")
        if self.ceiling_db > 40:
            errors.append(f"ceiling_db={self.ceiling_db} exceeds 40 dB")
        if self.floor_db < 0 or self.floor_db >= self.ceiling_db:
            errors.append("need 0 <= floor_db < ceiling_db")
        if self.floor_thickness_um / self.um_per_px < 1:
            errors.append("floor thickness renders thinner than one pixel")
        if self.floor_thickness_um >= self.base_thickness_um * min(RING_BASE_FACTOR.values()) * 0.65:
            errors.append("floor thickness must stay well below the base thickness")
        if set(self.amplitudes) != set(SECTORS) or not all(0 <= a <= 1 for a in self.amplitudes.values()):
            errors.append("amplitudes need one value in [0, 1] per sector")
        if self.fixed_damage is not None and (
            len(self.fixed_damage) != len(SECTORS) or not all(0 <= d <= 1 for d in self.fixed_damage)
        ):
            errors.append("fixed_damage needs six values in [0, 1]")
        if self.noise_db < 0 or self.noise_pixel < 0 or self.slope <= 0:
            errors.append("noise levels must be >= 0 and slope > 0")
        if self.ring_height < 16 or self.ring_width < 36 or self.slo_size < 16:
            errors.append("images too small to render")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def um_per_px(self) -> float:
        return self.depth_um / self.ring_height

    def to_dict(self) -> dict:
        return asdict(self)


def law(t, cfg: SynthConfig):
    """Threshold (dB) for normalized thickness ``t`` in [0, 1]; monotone increasing."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0, 1)
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    lo, hi = sig(-cfg.slope * cfg.midpoint), sig(cfg.slope * (1 - cfg.midpoint))
    s = (sig(cfg.slope * (t - cfg.midpoint)) - lo) / (hi - lo)
    return cfg.floor_db + (cfg.ceiling_db - cfg.floor_db) * s


def column_sectors(width: int) -> list[str]:
    """VF sector served by each ring column (OD orientation)."""
    out = []
    for c in range(width):
        theta = 360.0 * (c + 0.5) / width
        a = theta - 360 if theta >= 310 else theta
        out.append(next(s for lo, hi, s in DISC_SECTORS if lo <= a < hi))
    return out


def _base_profile_um(width: int, cfg: SynthConfig, diameter: float) -> np.ndarray:
    theta = np.deg2rad(360.0 * (np.arange(width) + 0.5) / width)
    double_hump = 1 + 0.35 * np.cos(2 * (theta - np.pi / 2))
    return cfg.base_thickness_um * RING_BASE_FACTOR[diameter] * double_hump


def _band_top(width: int, height: int) -> np.ndarray:
    theta = np.deg2rad(360.0 * (np.arange(width) + 0.5) / width)
    return height * (0.3 + 0.06 * np.sin(theta))


def render_ring(damage: dict, cfg: SynthConfig, diameter: float, rng: np.random.Generator) -> np.ndarray:
    w, h = cfg.ring_width, cfg.ring_height
    sectors = column_sectors(w)
    t = np.array([1.0 - damage[s] for s in sectors])
    base = _base_profile_um(w, cfg, diameter)
    thick_px = (cfg.floor_thickness_um + (base - cfg.floor_thickness_um) * t) / cfg.um_per_px
    top = _band_top(w, h)
    rows = np.arange(h)[:, None]
    # exact area coverage of [top, top + thick) by each pixel row
    cover = np.clip(np.minimum(rows + 1, top + thick_px) - np.maximum(rows, top), 0, 1)
    img = BACKGROUND + (BAND - BACKGROUND) * cover
    rpe = int(round(0.78 * h))
    img[rpe:rpe + max(1, h // 40)] = RPE
    if cfg.noise_pixel > 0:
        img = img + rng.normal(0, cfg.noise_pixel, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def render_slo(damage: dict, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.slo_size
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    cy = cx = n / 2
    r = np.hypot(yy - cy, xx - cx)
    # image y grows downward (superior is -dy); temporal lies toward -x for a displayed OD fundus
    ang = np.rad2deg(np.arctan2(-(yy - cy), -(xx - cx))) % 360
    ang = np.where(ang >= 310, ang - 360, ang)
    disc_r = 0.18 * n
    cup_r = np.zeros_like(r)
    for lo, hi, s in DISC_SECTORS:
        sel = (ang >= lo) & (ang < hi)
        cup_r[sel] = disc_r * (0.3 + 0.6 * damage[s])
    img = 0.3 + 0.1 * (1 - r / r.max())
    img = np.where(r < disc_r, 0.75, img)
    img = np.where(r < cup_r, 0.95, img)
    if cfg.noise_pixel > 0:
        img = img + rng.normal(0, cfg.noise_pixel, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def thresholds_from_damage(damage: dict, cfg: SynthConfig, sector_map: SectorMap) -> np.ndarray:
    t = np.array([1.0 - damage[s] for s in sector_map.assignment])
    return law(t, cfg)


def _reliability(rng: np.random.Generator, cfg: SynthConfig) -> tuple[float, float, float, bool]:
    fp, fn, fl = rng.uniform(0, 0.10), rng.uniform(0, 0.25), rng.uniform(0, 0.15)
    reliable = rng.random() >= cfg.unreliable_fraction
    if not reliable:
        which = rng.integers(0, 3)
        if which == 0:
            fp = rng.uniform(0.16, 0.4)
        elif which == 1:
            fn = rng.uniform(0.34, 0.6)
        else:
            fl = rng.uniform(0.21, 0.5)
    return float(np.float32(fp)), float(np.float32(fn)), float(np.float32(fl)), reliable


def _exam_seeds(cfg: SynthConfig) -> np.ndarray:
    return np.random.SeedSequence(cfg.seed).generate_state(cfg.n_patients * 2, dtype=np.uint64)


def generate_exams(cfg: SynthConfig, sector_map: SectorMap | None = None) -> tuple[list[ExamPair], list[dict]]:
    """Exams plus one truth row per exam (generating parameters)."""
    sector_map = sector_map or load_sector_map()
    seeds = _exam_seeds(cfg)
    exams, truth = [], []
    t0 = datetime(2015, 1, 1, tzinfo=timezone.utc)
    for p in range(cfg.n_patients):
        prng = np.random.default_rng(int(seeds[2 * p]))
        severity = float(prng.beta(1.0, 2.2))
        trend = float(prng.uniform(0.0, 0.06))
        jitter = {s: float(prng.normal(0, 0.3)) for s in SECTORS}
        eye = "OD" if prng.random() < 0.5 else "OS"
        start = t0 + timedelta(days=int(prng.integers(0, 4 * 365)), seconds=int(prng.integers(0, 86400)))
        erng = np.random.default_rng(int(seeds[2 * p + 1]))
        for k in range(cfg.exams_per_patient):
            if cfg.fixed_damage is not None:
                damage = dict(zip(SECTORS, map(float, cfg.fixed_damage)))
            else:
                damage = {
                    s: float(np.clip((severity + k * trend) * cfg.amplitudes[s] * (1 + jitter[s]), 0, 1))
                    for s in SECTORS
                }
            fp, fn, fl, reliable = _reliability(erng, cfg)
            noise = cfg.noise_db * (1 if reliable else cfg.unreliable_noise_factor)
            thr = thresholds_from_damage(damage, cfg, sector_map)
            if noise > 0:
                thr = thr + erng.normal(0, noise, thr.shape)
            thr = np.clip(thr, 0, 50).astype(np.float32)
            md = float(np.float32(np.mean(thr.astype(np.float64) - cfg.md_reference_db)))
            rings = []
            for d in RING_DIAMETERS:
                img = render_ring(damage, cfg, d, erng)
                rings.append(OctRing(d, RasterImage(img[:, ::-1] if eye == "OS" else img)))
            slo = render_slo(damage, cfg, erng)
            vf = VFExam(thr, md, fp, fn, fl, eye, p + 1, start + timedelta(days=180 * k))
            exams.append(ExamPair(vf, tuple(rings), RasterImage(slo[:, ::-1] if eye == "OS" else slo)))
            truth.append({"patient_id": p + 1, "eye": eye, "severity": severity, "trend": trend,
                          "reliable": int(reliable), **{f"damage_{s}": damage[s] for s in SECTORS}})
    for row, eid in zip(truth, exam_ids(exams)):
        row["exam_id"] = eid
    return exams, truth


def generate_dataset(cfg: SynthConfig, sector_map: SectorMap | None = None) -> bytes:
    return write_container(generate_exams(cfg, sector_map)[0])


def truth_csv(truth: list[dict]) -> str:
    cols = ["exam_id", "patient_id", "eye", "severity", "trend", "reliable"] + [f"damage_{s}" for s in SECTORS]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for row in truth:
        w.writerow({c: (f"{row[c]:.6f}" if isinstance(row[c], float) else row[c]) for c in cols})
    return buf.getvalue()


# ---------------------------------------------------------------- oracle


def measure_thickness_px(image: np.ndarray) -> np.ndarray:
    """Per-column band thickness in pixels from intensities above background."""
    h = image.shape[0]
    band = np.asarray(image, dtype=np.float64)[: int(BAND_ROWS * h)]
    return np.sum((band - BACKGROUND) / (BAND - BACKGROUND), axis=0)


def estimate_damage(exam: ExamPair, cfg: SynthConfig) -> dict:
    """Invert the ring rendering: per-sector damage averaged over the three rings."""
    sectors = np.array(column_sectors(cfg.ring_width))
    est = {s: [] for s in SECTORS}
    for ring in exam.rings:
        d = min(RING_DIAMETERS, key=lambda v: abs(v - ring.diameter_mm))
        img = ring.image.pixels
        if exam.eye == "OS":
            img = img[:, ::-1]
        if img.shape != (cfg.ring_height, cfg.ring_width):
            raise ValueError("oracle needs images at the generating resolution")
        thick_um = measure_thickness_px(img) * cfg.um_per_px
        base = _base_profile_um(cfg.ring_width, cfg, d)
        t = (thick_um - cfg.floor_thickness_um) / (base - cfg.floor_thickness_um)
        for s in SECTORS:
            est[s].append(t[sectors == s])
    return {s: float(np.clip(1 - np.mean(np.concatenate(v)), 0, 1)) for s, v in est.items()}


def oracle_predictor(cfg: SynthConfig, exam: ExamPair, sector_map: SectorMap | None = None) -> np.ndarray:
    """Noise-free thresholds implied by the exam's images under the generating law."""
    sector_map = sector_map or load_sector_map()
    return thresholds_from_damage(estimate_damage(exam, cfg), cfg, sector_map)
