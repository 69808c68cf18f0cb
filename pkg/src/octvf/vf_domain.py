"""24-2 visual field grid, exam records, reliability rules and sector maps.

Coordinates follow the right-eye (OD) convention: positive ``x_deg`` is the
temporal field, where the physiological blind spot sits at (15, +/-3).

Index order
-----------
The canonical order is row-major from the top row (y=+21) down to the
bottom row (y=-21), left to right (increasing x) inside each row, with the
OD layout.  Left-eye exams use the *same* indices: point ``i`` of the OS
grid is the mirror image (-x, y) of point ``i`` of the OD grid, so a
threshold vector is always indexed anatomically and one model output slot
means the same retinal location for both eyes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

N_POINTS = 54
N_ACTIVE = 52

SECTORS = ("Central", "Temporal", "Inferior", "InferiorNasal", "Superior", "SuperiorNasal")

DEFAULT_LIMITS = {"fp_max": 0.15, "fn_max": 0.33, "fl_max": 0.20}

# x positions per row of the OD 24-2 chart, top row first
_ROWS_OD = (
    (21, (-9, -3, 3, 9)),
    (15, (-15, -9, -3, 3, 9, 15)),
    (9, (-21, -15, -9, -3, 3, 9, 15, 21)),
    (3, (-27, -21, -15, -9, -3, 3, 9, 15, 21)),
    (-3, (-27, -21, -15, -9, -3, 3, 9, 15, 21)),
    (-9, (-21, -15, -9, -3, 3, 9, 15, 21)),
    (-15, (-15, -9, -3, 3, 9, 15)),
    (-21, (-9, -3, 3, 9)),
)
_BLIND_SPOT_OD = {(15, 3), (15, -3)}


class VFError(ValueError):
    pass


class SectorMapError(VFError):
    pass


@dataclass(frozen=True)
class VFPoint:
    x_deg: float
    y_deg: float
    blind_spot: bool = False


@dataclass(frozen=True)
class VFGrid:
    points: tuple[VFPoint, ...]
    eye: str = "OD"

    def __post_init__(self):
        coords = [(p.x_deg, p.y_deg) for p in self.points]
        if len(set(coords)) != len(coords):
            raise VFError("duplicate grid coordinates")
        if self.eye not in ("OD", "OS"):
            raise VFError(f"unknown eye {self.eye!r}")

    def __len__(self):
        return len(self.points)

    @property
    def active_indices(self) -> tuple[int, ...]:
        """Positions (in the full point list) of the non-blind-spot points."""
        return tuple(i for i, p in enumerate(self.points) if not p.blind_spot)

    @property
    def blind_spot_indices(self) -> tuple[int, ...]:
        return tuple(i for i, p in enumerate(self.points) if p.blind_spot)

    def active_points(self) -> list[VFPoint]:
        return [self.points[i] for i in self.active_indices]

    def active_coords(self) -> np.ndarray:
        """(52, 2) array of (x, y) for the active points in index order."""
        return np.array([(p.x_deg, p.y_deg) for p in self.active_points()], dtype=float)

    def mirrored(self) -> "VFGrid":
        other = "OS" if self.eye == "OD" else "OD"
        pts = tuple(VFPoint(-p.x_deg, p.y_deg, p.blind_spot) for p in self.points)
        return VFGrid(pts, other)

    def to_active(self, values54: Sequence[float]) -> np.ndarray:
        """Drop the blind-spot slots of a 54-vector."""
        v = np.asarray(values54)
        if v.shape[-1] != len(self.points):
            raise VFError(f"expected {len(self.points)} values, got {v.shape[-1]}")
        return v[..., list(self.active_indices)]

    def to_full(self, values52: Sequence[float], fill: float = np.nan) -> np.ndarray:
        """Expand a 52-vector to the 54-slot layout, blind spots set to ``fill``."""
        v = np.asarray(values52, dtype=np.float32)
        out = np.full(v.shape[:-1] + (len(self.points),), fill, dtype=np.float32)
        out[..., list(self.active_indices)] = v
        return out


def grid_24_2(eye: str = "OD") -> VFGrid:
    """Return the canonical 54-point 24-2 grid (see module docstring for the index order)."""
    pts = []
    for y, xs in _ROWS_OD:
        for x in xs:
            pts.append(VFPoint(float(x), float(y), (x, y) in _BLIND_SPOT_OD))
    grid = VFGrid(tuple(pts), "OD")
    return grid if eye == "OD" else grid.mirrored()


def clamp_threshold(value: float) -> float:
    """Printout entries below 0 dB (sentinel -1) are stored as 0 dB."""
    if value < -1 or value > 50:
        raise VFError(f"threshold {value} outside [-1, 50] dB")
    return max(0.0, float(value))


@dataclass(frozen=True)
class VFExam:
    thresholds: np.ndarray
    md: float
    fp: float
    fn: float
    fl: float
    eye: str
    patient_id: int
    exam_time: datetime

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float32)
        if t.shape != (N_ACTIVE,):
            raise VFError(f"expected {N_ACTIVE} thresholds, got shape {t.shape}")
        if not np.all(np.isfinite(t)) or t.min() < -1 or t.max() > 50:
            raise VFError("thresholds must be finite and within [-1, 50] dB")
        t = np.maximum(t, 0).astype(np.float32)
        t.setflags(write=False)
        object.__setattr__(self, "thresholds", t)
        for name in ("fp", "fn", "fl"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise VFError(f"{name}={v} outside [0, 1]")
        if self.eye not in ("OD", "OS"):
            raise VFError(f"unknown eye {self.eye!r}")
        if self.exam_time.tzinfo is None:
            object.__setattr__(self, "exam_time", self.exam_time.replace(tzinfo=timezone.utc))

    def __eq__(self, other):
        if not isinstance(other, VFExam):
            return NotImplemented
        return (
            np.array_equal(self.thresholds, other.thresholds)
            and (self.md, self.fp, self.fn, self.fl, self.eye, self.patient_id, self.exam_time)
            == (other.md, other.fp, other.fn, other.fl, other.eye, other.patient_id, other.exam_time)
        )

    __hash__ = None

    def value_at(self, x: float, y: float, grid: VFGrid | None = None) -> float:
        """Threshold at field coordinate (x, y) in this exam's own eye frame."""
        grid = grid if grid is not None else grid_24_2(self.eye)
        for k, p in enumerate(grid.active_points()):
            if p.x_deg == x and p.y_deg == y:
                return float(self.thresholds[k])
        raise KeyError((x, y))


def passes_reliability(exam: VFExam, limits: Mapping[str, float] | None = None) -> bool:
    """True iff no reliability index exceeds its limit (limits are inclusive)."""
    lim = dict(DEFAULT_LIMITS)
    if limits:
        lim.update(limits)
    for key, v in lim.items():
        if not 0.0 <= v <= 1.0:
            raise VFError(f"reliability limit {key}={v} outside [0, 1]")
    return exam.fp <= lim["fp_max"] and exam.fn <= lim["fn_max"] and exam.fl <= lim["fl_max"]


def mirror_exam(exam: VFExam, grid: VFGrid | None = None) -> VFExam:
    """Re-express an exam in the other eye's frame: (x, y) -> (-x, y).

    ``grid`` is the grid of the exam's current eye.  The mirrored grid must
    coincide point for point (blind spots included) with the other eye's
    layout, otherwise the threshold vector cannot be carried over.
    """
    grid = grid if grid is not None else grid_24_2(exam.eye)
    if grid.eye != exam.eye:
        raise VFError(f"grid is for {grid.eye} but exam is {exam.eye}")
    target = grid_24_2("OS" if exam.eye == "OD" else "OD")
    mirrored = grid.mirrored()
    lookup = {(p.x_deg, p.y_deg): i for i, p in enumerate(target.active_points())}
    if len(mirrored) != len(target) or {(p.x_deg, p.y_deg, p.blind_spot) for p in mirrored.points} != {
        (p.x_deg, p.y_deg, p.blind_spot) for p in target.points
    }:
        raise VFError("grid is not mirror-symmetric after blind-spot relocation")
    perm = [lookup[(p.x_deg, p.y_deg)] for p in mirrored.active_points()]
    out = np.empty(N_ACTIVE, dtype=np.float32)
    out[perm] = exam.thresholds
    return replace(exam, thresholds=out, eye=target.eye)


def normalize_laterality(exam: VFExam) -> VFExam:
    return mirror_exam(exam) if exam.eye == "OS" else exam


@dataclass(frozen=True)
class SectorMap:
    assignment: tuple[str, ...]

    def __post_init__(self):
        if len(self.assignment) != N_ACTIVE:
            raise SectorMapError(f"sector map must cover {N_ACTIVE} points")
        unknown = set(self.assignment) - set(SECTORS)
        if unknown:
            raise SectorMapError(f"unknown sector {sorted(unknown)[0]!r}")
        empty = [s for s in SECTORS if s not in self.assignment]
        if empty:
            raise SectorMapError(f"empty sector {empty[0]!r}")

    def indices(self, sector: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.assignment) if s == sector], dtype=int)

    def sizes(self) -> dict[str, int]:
        return {s: int(sum(a == s for a in self.assignment)) for s in SECTORS}


def load_sector_map(source: str | io.TextIOBase | None = None) -> SectorMap:
    """Read a ``point_index,sector`` CSV; ``None`` loads the bundled default.

    The bundled table is an approximation of the Garway-Heath map drawn from
    the published structure-function map, not a digitised copy.
    """
    if source is None:
        text = resources.files("octvf.data").joinpath("sectors.csv").read_text()
        fh: Iterable[str] = io.StringIO(text)
    elif isinstance(source, str):
        with open(source, newline="") as f:
            fh = io.StringIO(f.read())
    else:
        fh = source
    reader = csv.DictReader(fh)
    if reader.fieldnames is None or not {"point_index", "sector"} <= set(reader.fieldnames):
        raise SectorMapError("sector table needs columns point_index,sector")
    assignment: dict[int, str] = {}
    for row_no, row in enumerate(reader, start=2):
        try:
            idx = int(row["point_index"])
        except ValueError:
            raise SectorMapError(f"row {row_no}: bad point_index {row['point_index']!r}") from None
        label = row["sector"].strip()
        if not 0 <= idx < N_ACTIVE:
            raise SectorMapError(f"row {row_no}: point_index {idx} out of range")
        if label not in SECTORS:
            raise SectorMapError(f"row {row_no}: unknown sector {label!r}")
        if idx in assignment:
            raise SectorMapError(f"row {row_no}: point_index {idx} assigned twice")
        assignment[idx] = label
    missing = [i for i in range(N_ACTIVE) if i not in assignment]
    if missing:
        raise SectorMapError(f"unassigned point {missing[0]}")
    return SectorMap(tuple(assignment[i] for i in range(N_ACTIVE)))


def default_sector_assignment() -> tuple[str, ...]:
    """Rule-based default used to build the bundled sectors.csv."""
    out = []
    for p in grid_24_2().active_points():
        x, y = p.x_deg, p.y_deg
        upper = y > 0
        if x >= 15:
            s = "Temporal"
        elif (x in (-3, 3, 9) and abs(y) == 3) or (x in (3, 9) and abs(y) == 9):
            s = "Central"
        elif (x <= -9 and abs(y) <= 9) or (x == -15 and abs(y) == 15):
            s = "SuperiorNasal" if upper else "InferiorNasal"
        else:
            s = "Superior" if upper else "Inferior"
        out.append(s)
    return tuple(out)


@dataclass(frozen=True)
class RetestCITable:
    measured_db: np.ndarray
    lower_db: np.ndarray
    upper_db: np.ndarray = field()

    def __post_init__(self):
        m = np.asarray(self.measured_db, float)
        lo = np.asarray(self.lower_db, float)
        hi = np.asarray(self.upper_db, float)
        if not (m.shape == lo.shape == hi.shape) or m.ndim != 1 or m.size == 0:
            raise VFError("retest table columns must be equal-length, non-empty")
        if np.any(lo > hi):
            raise VFError("retest table has lower > upper")
        if np.any(np.diff(m) <= 0):
            raise VFError("retest measured levels must be unique and sorted")
        object.__setattr__(self, "measured_db", m)
        object.__setattr__(self, "lower_db", lo)
        object.__setattr__(self, "upper_db", hi)

    def row_for(self, level: float) -> tuple[float, float]:
        """CI at the nearest tabulated measured level (ties go to the lower level)."""
        if level < self.measured_db[0] or level > self.measured_db[-1]:
            raise VFError(f"level {level} dB outside retest table range "
                          f"[{self.measured_db[0]}, {self.measured_db[-1]}]")
        k = int(np.argmin(np.abs(self.measured_db - level)))
        return float(self.lower_db[k]), float(self.upper_db[k])


def load_retest_ci(path: str | None = None) -> RetestCITable:
    """Read ``measured_db,lower_db,upper_db``; ``None`` loads the bundled placeholder table."""
    if path is None:
        text = resources.files("octvf.data").joinpath("retest_ci.csv").read_text()
    else:
        with open(path, newline="") as f:
            text = f.read()
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise VFError("retest table is empty")
    return RetestCITable(
        np.array([float(r["measured_db"]) for r in rows]),
        np.array([float(r["lower_db"]) for r in rows]),
        np.array([float(r["upper_db"]) for r in rows]),
    )
