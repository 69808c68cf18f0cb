from __future__ import annotations

from datetime import datetime, timezone

import numpy as np
import pytest

from octvf.oct_ingest import RING_DIAMETERS, ExamPair, OctRing, RasterImage
from octvf.synth import SynthConfig
from octvf.vf_domain import N_ACTIVE, VFExam


def make_vf(thresholds=None, *, md=-3.0, fp=0.0, fn=0.0, fl=0.0, eye="OD", patient_id=1,
            when=1_500_000_000) -> VFExam:
    if thresholds is None:
        thresholds = np.linspace(5, 30, N_ACTIVE)
    return VFExam(np.asarray(thresholds, dtype=np.float32), md, fp, fn, fl, eye, patient_id,
                  datetime.fromtimestamp(when, tz=timezone.utc))


def make_exam(rng: np.random.Generator | None = None, *, ring=(12, 8), slo=(6, 6), zero=False, **vf_kw) -> ExamPair:
    """Small exam; ``ring``/``slo`` are (width, height)."""
    rng = rng or np.random.default_rng(0)

    def img(w, h):
        return RasterImage(np.zeros((h, w), np.float32) if zero else rng.random((h, w), dtype=np.float32))

    rings = tuple(OctRing(d, img(*ring)) for d in RING_DIAMETERS)
    return ExamPair(make_vf(**vf_kw), rings, img(*slo))


def random_exams(rng: np.random.Generator, n_patients: int, max_exams: int = 3, **kw) -> list[ExamPair]:
    exams = []
    for p in range(n_patients):
        for k in range(int(rng.integers(1, max_exams + 1))):
            vf = dict(
                thresholds=rng.uniform(0, 40, N_ACTIVE).astype(np.float32),
                md=float(np.float32(rng.normal(-5, 5))),
                fp=float(np.float32(rng.uniform(0, 0.3))),
                fn=float(np.float32(rng.uniform(0, 0.4))),
                fl=float(np.float32(rng.uniform(0, 0.3))),
                eye="OD" if rng.random() < 0.5 else "OS",
                patient_id=1000 + p,
                when=1_400_000_000 + 86400 * k,
            )
            exams.append(make_exam(rng, **kw, **vf))
    return exams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_synth():
    return SynthConfig(n_patients=12, exams_per_patient=2, ring_width=48, ring_height=32, slo_size=32, seed=3)


# Acceptance criteria record one line each; printed together after the run.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
