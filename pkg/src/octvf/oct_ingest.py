"""Exam container I/O, VF CSV ingestion and patient-level partitioning.

Container layout (little-endian throughout)::

    magic        8s   b"OCTVF01\\n"
    version      u16  1
    exam_count   u32
    per exam:
      patient_id     u32
      eye            u8   0 = OD, 1 = OS
      unix_seconds   i64
      thresholds     54 x f32, canonical grid order, blind-spot slots NaN
      md, fp, fn, fl 4 x f32
      3 ring blocks: diameter_mm f32, width u32, height u32, width*height x f32
      SLO block:     width u32, height u32, width*height x f32

Pixels are row-major f32 in [0, 1].  Writing is canonical, so equal exam
lists always serialize to equal bytes.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable, Mapping, Sequence

import numpy as np

from .vf_domain import (
    DEFAULT_LIMITS,
    N_ACTIVE,
    N_POINTS,
    VFExam,
    clamp_threshold,
    grid_24_2,
    passes_reliability,
)

MAGIC = b"OCTVF01\n"
VERSION = 1
RING_DIAMETERS = (3.5, 4.1, 4.7)
MODALITIES = ("ring3.5", "ring4.1", "ring4.7", "slo")

_HEADER = struct.Struct("<8sHI")
_EXAM_META = struct.Struct("<IBq")
_VF_BLOCK = struct.Struct(f"<{N_POINTS + 4}f")
_RING_HEAD = struct.Struct("<fII")
_SLO_HEAD = struct.Struct("<II")


class ContainerError(ValueError):
    """Structural problem in a container; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class NaNPixelError(ContainerError):
    pass


class DuplicateRingError(ContainerError):
    pass


class InvalidFieldError(ContainerError):
    pass


@dataclass(frozen=True, eq=False)
class RasterImage:
    pixels: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if p.ndim != 2 or p.size == 0:
            raise ValueError(f"image must be a non-empty 2-D array, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("image contains non-finite pixels")
        if p.min() < 0 or p.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


def ring_name(diameter_mm: float) -> str:
    for d in RING_DIAMETERS:
        if abs(diameter_mm - d) < 1e-4:
            return f"ring{d}"
    raise ValueError(f"diameter {diameter_mm} mm is not one of {RING_DIAMETERS}")


@dataclass(frozen=True, eq=False)
class OctRing:
    diameter_mm: float
    image: RasterImage

    def __post_init__(self):
        ring_name(self.diameter_mm)
        # stored at container precision
        object.__setattr__(self, "diameter_mm", float(np.float32(self.diameter_mm)))

    @property
    def name(self) -> str:
        return ring_name(self.diameter_mm)

    def __eq__(self, other):
        if not isinstance(other, OctRing):
            return NotImplemented
        return self.diameter_mm == other.diameter_mm and self.image == other.image

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ExamPair:
    vf: VFExam
    rings: tuple[OctRing, ...]
    slo: RasterImage

    def __post_init__(self):
        object.__setattr__(self, "rings", tuple(self.rings))
        names = [r.name for r in self.rings]
        if sorted(names) != sorted(f"ring{d}" for d in RING_DIAMETERS):
            raise ValueError(f"exam needs exactly one ring per diameter, got {names}")

    @property
    def patient_id(self) -> int:
        return self.vf.patient_id

    @property
    def eye(self) -> str:
        return self.vf.eye

    @property
    def exam_time(self) -> datetime:
        return self.vf.exam_time

    @property
    def exam_key(self) -> str:
        return f"P{self.patient_id:06d}-{self.eye}-{int(self.exam_time.timestamp())}"

    def image(self, modality: str) -> RasterImage:
        if modality == "slo":
            return self.slo
        for r in self.rings:
            if r.name == modality:
                return r.image
        raise KeyError(f"exam {self.exam_key} has no {modality!r} image")

    def __eq__(self, other):
        if not isinstance(other, ExamPair):
            return NotImplemented
        return self.vf == other.vf and self.rings == other.rings and self.slo == other.slo

    __hash__ = None


def exam_ids(exams: Sequence[ExamPair]) -> list[str]:
    """Stable identifiers; repeated (patient, eye, time) keys get a ``#k`` suffix."""
    seen: Counter[str] = Counter()
    out = []
    for e in exams:
        key = e.exam_key
        out.append(key if seen[key] == 0 else f"{key}#{seen[key]}")
        seen[key] += 1
    return out


# ---------------------------------------------------------------- container


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedError(
                f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} remain", self.pos
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct, what: str) -> tuple:
        return st.unpack(self.take(st.size, what))

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)


def _read_image(r: _Reader, w: int, h: int, what: str) -> RasterImage:
    start = r.pos
    if w == 0 or h == 0:
        raise InvalidFieldError(f"{what} has zero size", start - 8)
    px = r.floats(w * h, f"{what} pixels")
    if np.isnan(px).any():
        bad = int(np.flatnonzero(np.isnan(px))[0])
        raise NaNPixelError(f"NaN pixel in {what}", start + 4 * bad)
    if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
        raise InvalidFieldError(f"{what} pixels outside [0, 1]", start)
    return RasterImage(px.reshape(h, w))


def parse_container(data: bytes) -> list[ExamPair]:
    r = _Reader(bytes(data))
    if len(data) < len(MAGIC) or bytes(data[:len(MAGIC)]) != MAGIC:
        raise BadMagicError("bad magic, expected b'OCTVF01\\n'", 0)
    _, version, count = r.unpack(_HEADER, "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}", 8)
    grid = grid_24_2()
    active = list(grid.active_indices)
    blind = list(grid.blind_spot_indices)
    exams = []
    for i in range(count):
        exam_start = r.pos
        pid, eye_code, unix = r.unpack(_EXAM_META, f"exam {i} header")
        if eye_code not in (0, 1):
            raise InvalidFieldError(f"exam {i}: eye code {eye_code}", exam_start + 4)
        vf_start = r.pos
        vf_vals = np.array(r.unpack(_VF_BLOCK, f"exam {i} VF block"), dtype=np.float32)
        t54, (md, fp, fn, fl) = vf_vals[:N_POINTS], vf_vals[N_POINTS:]
        if not np.all(np.isnan(t54[blind])):
            raise InvalidFieldError(f"exam {i}: blind-spot slots must be NaN", vf_start)
        t = t54[active]
        if np.isnan(t).any():
            bad = active[int(np.flatnonzero(np.isnan(t))[0])]
            raise InvalidFieldError(f"exam {i}: NaN threshold", vf_start + 4 * bad)
        if t.min() < 0 or t.max() > 50:
            raise InvalidFieldError(f"exam {i}: threshold outside [0, 50] dB", vf_start)
        for name, v in (("fp", fp), ("fn", fn), ("fl", fl)):
            if not 0 <= v <= 1:
                raise InvalidFieldError(f"exam {i}: {name}={v} outside [0, 1]", vf_start)
        if not math.isfinite(md):
            raise InvalidFieldError(f"exam {i}: non-finite MD", vf_start + 4 * N_POINTS)
        vf = VFExam(
            thresholds=t, md=float(md), fp=float(fp), fn=float(fn), fl=float(fl),
            eye="OD" if eye_code == 0 else "OS", patient_id=pid,
            exam_time=datetime.fromtimestamp(unix, tz=timezone.utc),
        )
        rings = []
        seen = set()
        for k in range(3):
            ring_start = r.pos
            d, w, h = r.unpack(_RING_HEAD, f"exam {i} ring {k} header")
            try:
                name = ring_name(d)
            except ValueError:
                raise InvalidFieldError(f"exam {i}: unknown ring diameter {d}", ring_start) from None
            if name in seen:
                raise DuplicateRingError(f"exam {i}: duplicate ring diameter {d:.1f} mm", ring_start)
            seen.add(name)
            rings.append(OctRing(float(d), _read_image(r, w, h, f"exam {i} {name}")))
        w, h = r.unpack(_SLO_HEAD, f"exam {i} SLO header")
        slo = _read_image(r, w, h, f"exam {i} SLO")
        exams.append(ExamPair(vf, tuple(rings), slo))
    if r.pos != len(data):
        raise InvalidFieldError(f"{len(data) - r.pos} trailing bytes", r.pos)
    return exams


def write_container(exams: Iterable[ExamPair]) -> bytes:
    exams = list(exams)
    grid = grid_24_2()
    parts = [_HEADER.pack(MAGIC, VERSION, len(exams))]
    for e in exams:
        vf = e.vf
        parts.append(_EXAM_META.pack(vf.patient_id, 0 if vf.eye == "OD" else 1,
                                     int(vf.exam_time.timestamp())))
        block = np.empty(N_POINTS + 4, dtype="<f4")
        block[:N_POINTS] = grid.to_full(vf.thresholds)
        block[N_POINTS:] = (vf.md, vf.fp, vf.fn, vf.fl)
        parts.append(block.tobytes())
        for ring in e.rings:
            img = ring.image
            parts.append(_RING_HEAD.pack(ring.diameter_mm, img.width, img.height))
            parts.append(img.pixels.astype("<f4").tobytes())
        parts.append(_SLO_HEAD.pack(e.slo.width, e.slo.height))
        parts.append(e.slo.pixels.astype("<f4").tobytes())
    return b"".join(parts)


def container_size(ring_dims: Sequence[tuple[int, int]], slo_dims: tuple[int, int], n_exams: int = 1) -> int:
    """Closed-form byte count for ``n_exams`` exams with the given (w, h) image sizes."""
    per_exam = _EXAM_META.size + _VF_BLOCK.size
    per_exam += sum(_RING_HEAD.size + 4 * w * h for w, h in ring_dims)
    per_exam += _SLO_HEAD.size + 4 * slo_dims[0] * slo_dims[1]
    return _HEADER.size + n_exams * per_exam


def read_container(path: str | os.PathLike) -> list[ExamPair]:
    with open(path, "rb") as f:
        return parse_container(f.read())


def save_container(exams: Iterable[ExamPair], path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(write_container(exams))


# ------------------------------------------------------------ CSV ingestion


VF_CSV_COLUMNS = ["patient_id", "eye", "exam_time", "md", "fp", "fn", "fl"] + [
    f"t{i:02d}" for i in range(1, N_POINTS + 1)
]


def _parse_time(text: str) -> datetime:
    text = text.strip()
    try:
        return datetime.fromtimestamp(int(text), tz=timezone.utc)
    except ValueError:
        pass
    t = datetime.fromisoformat(text.replace("Z", "+00:00"))
    return t if t.tzinfo else t.replace(tzinfo=timezone.utc)


def _parse_threshold(text: str) -> float:
    text = text.strip()
    if text.startswith("<"):
        return 0.0
    return clamp_threshold(float(text))


def read_vf_csv(path: str | os.PathLike) -> list[VFExam]:
    """Load ``vf.csv`` rows; blind-spot columns must be empty, ``<0`` or -1 entries map to 0 dB."""
    grid = grid_24_2()
    blind = set(grid.blind_spot_indices)
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in VF_CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for line, row in enumerate(reader, start=2):
            try:
                vals54 = []
                for i in range(N_POINTS):
                    cell = row[f"t{i + 1:02d}"].strip()
                    if i in blind:
                        if cell:
                            raise ValueError(f"blind-spot column t{i + 1:02d} must be empty")
                        vals54.append(np.nan)
                    else:
                        vals54.append(_parse_threshold(cell))
                eye = row["eye"].strip().upper()
                out.append(VFExam(
                    thresholds=grid.to_active(np.array(vals54, dtype=np.float32)),
                    md=float(np.float32(row["md"])),
                    fp=float(np.float32(row["fp"])),
                    fn=float(np.float32(row["fn"])),
                    fl=float(np.float32(row["fl"])),
                    eye=eye,
                    patient_id=int(row["patient_id"]),
                    exam_time=_parse_time(row["exam_time"]),
                ))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
    return out


def _load_image_file(path: str) -> RasterImage:
    from .augment import normalize_intensity

    if path.endswith(".npy"):
        arr = np.load(path)
        return RasterImage(np.clip(arr.astype(np.float32), 0, 1))
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    hi = 65535.0 if arr.dtype == np.uint16 else 255.0
    return normalize_intensity(arr.astype(np.float64), 0.0, hi)


def image_stem(vf: VFExam) -> str:
    return f"{vf.patient_id}_{vf.eye}_{int(vf.exam_time.timestamp())}"


def ingest(vf_csv: str, image_dir: str) -> list[ExamPair]:
    """Pair VF rows with ``<patient>_<eye>_<unix>_<modality>.{npy,png}`` images."""
    exams = []
    for vf in read_vf_csv(vf_csv):
        imgs = {}
        for m in MODALITIES:
            for ext in (".npy", ".png"):
                p = os.path.join(image_dir, f"{image_stem(vf)}_{m}{ext}")
                if os.path.exists(p):
                    imgs[m] = _load_image_file(p)
                    break
            else:
                raise FileNotFoundError(f"no {m} image for exam {image_stem(vf)} in {image_dir}")
        rings = tuple(OctRing(d, imgs[f"ring{d}"]) for d in RING_DIAMETERS)
        exams.append(ExamPair(vf, rings, imgs["slo"]))
    return exams


# ------------------------------------------------------------- partitioning


@dataclass(frozen=True)
class Partition:
    name: str
    exams: tuple[ExamPair, ...]
    ids: tuple[str, ...]

    @property
    def patients(self) -> set[int]:
        return {e.patient_id for e in self.exams}

    def __len__(self):
        return len(self.exams)


def split_by_patient(
    exams: Sequence[ExamPair],
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> tuple[Partition, Partition, Partition]:
    """Shuffle patients with a seeded RNG and cut by cumulative-floor allocation."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = exam_ids(exams)
    patients = sorted({e.patient_id for e in exams})
    n = len(patients)
    needed = sum(r > 0 for r in ratios)
    if n < max(needed, 3):
        raise ValueError(f"{n} patients cannot fill {needed} non-empty partitions")
    order = [patients[i] for i in np.random.default_rng(seed).permutation(n)]
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_val = math.floor((ratios[0] + ratios[1]) * n + 1e-9) - n_train
    cut = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
           "test": order[n_train + n_val:]}
    owner = {p: name for name, ps in cut.items() for p in ps}
    parts = []
    for name in ("train", "val", "test"):
        sel = [(e, i) for e, i in zip(exams, ids) if owner[e.patient_id] == name]
        parts.append(Partition(name, tuple(e for e, _ in sel), tuple(i for _, i in sel)))
    return tuple(parts)


def apply_reliability_policy(
    partitions: Sequence[Partition], limits: Mapping[str, float] | None = None
) -> tuple[Partition, ...]:
    """Drop unreliable exams from val/test; the training partition keeps them as label noise."""
    limits = dict(DEFAULT_LIMITS, **(limits or {}))
    out = []
    for part in partitions:
        if part.name == "train":
            out.append(part)
            continue
        keep = [(e, i) for e, i in zip(part.exams, part.ids) if passes_reliability(e.vf, limits)]
        out.append(Partition(part.name, tuple(e for e, _ in keep), tuple(i for _, i in keep)))
    return tuple(out)


def write_manifest(part: Partition, path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        f.write("".join(f"{i}\n" for i in part.ids))


def read_manifest(path: str | os.PathLike) -> list[str]:
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


def select(exams: Sequence[ExamPair], ids: Sequence[str]) -> list[ExamPair]:
    """Exams whose identifiers appear in ``ids``, in manifest order."""
    by_id = dict(zip(exam_ids(exams), exams))
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise KeyError(f"{len(missing)} manifest ids not in container, first: {missing[0]}")
    return [by_id[i] for i in ids]


__all__ = [
    "MAGIC", "MODALITIES", "RING_DIAMETERS", "N_ACTIVE",
    "ContainerError", "BadMagicError", "UnsupportedVersionError", "TruncatedError",
    "NaNPixelError", "DuplicateRingError", "InvalidFieldError",
    "RasterImage", "OctRing", "ExamPair", "Partition",
    "parse_container", "write_container", "container_size", "read_container", "save_container",
    "read_vf_csv", "ingest", "split_by_patient", "apply_reliability_policy",
    "exam_ids", "write_manifest", "read_manifest", "select",
]
