import csv
import struct

import numpy as np
import pytest
from conftest import make_exam, random_exams

from octvf.oct_ingest import (
    MAGIC, BadMagicError, DuplicateRingError, InvalidFieldError, NaNPixelError, RasterImage,
    TruncatedError, UnsupportedVersionError, VF_CSV_COLUMNS, apply_reliability_policy, container_size,
    exam_ids, ingest, parse_container, read_manifest, read_vf_csv, select, split_by_patient, write_container,
    write_manifest,
)
from octvf.vf_domain import grid_24_2


# file header + exam header + VF block
FIRST_RING = 14 + 13 + 232


class TestContainer:
    def test_empty(self):
        data = write_container([])
        assert data == MAGIC + struct.pack("<HI", 1, 0)
        assert parse_container(data) == []

    def test_round_trip(self, rng):
        exams = random_exams(rng, 4)
        data = write_container(exams)
        back = parse_container(data)
        assert back == exams
        assert write_container(back) == data

    def test_deterministic(self, rng):
        exams = random_exams(rng, 3)
        assert write_container(exams) == write_container(exams)

    def test_closed_form_size(self):
        # header 8+2+4; exam meta 4+1+8; VF 58*4; ring head 4+4+4; SLO head 4+4; pixels 4 bytes each
        e = make_exam(zero=True, ring=(12, 8), slo=(6, 6))
        expected = (8 + 2 + 4) + (4 + 1 + 8) + 58 * 4 + 3 * (12 + 4 * 12 * 8) + (8 + 4 * 6 * 6)
        assert len(write_container([e])) == expected == container_size([(12, 8)] * 3, (6, 6))

    def test_full_scale_size(self):
        # one exam at full resolution: rings 768x496, SLO 1536x1536
        n = container_size([(768, 496)] * 3, (1536, 1536))
        assert n == 14 + 13 + 232 + 3 * (12 + 4 * 768 * 496) + 8 + 4 * 1536 * 1536

    def test_blind_spot_slots_are_nan(self):
        data = write_container([make_exam()])
        vf = np.frombuffer(data[27:27 + 232], dtype="<f4")
        g = grid_24_2()
        assert np.isnan(vf[list(g.blind_spot_indices)]).all()
        assert not np.isnan(vf[list(g.active_indices)]).any()

    def test_bad_magic(self):
        with pytest.raises(BadMagicError) as info:
            parse_container(b"NOTMAGIC" + bytes(6))
        assert info.value.offset == 0

    def test_bad_version(self):
        with pytest.raises(UnsupportedVersionError) as info:
            parse_container(MAGIC + struct.pack("<HI", 2, 0))
        assert info.value.offset == 8

    def test_truncated_pixels(self):
        data = write_container([make_exam()])
        with pytest.raises(TruncatedError) as info:
            parse_container(data[:-5])
        # the SLO pixel block starts 8 bytes after its header
        assert info.value.offset == len(data) - 4 * 36

    def test_truncated_declared_count(self):
        data = MAGIC + struct.pack("<HI", 1, 2) + write_container([make_exam()])[14:]
        with pytest.raises(TruncatedError):
            parse_container(data)

    def test_nan_pixel_offset(self):
        data = bytearray(write_container([make_exam()]))
        ring0 = FIRST_RING
        pix = ring0 + 12 + 4 * 5
        data[pix:pix + 4] = struct.pack("<f", float("nan"))
        with pytest.raises(NaNPixelError) as info:
            parse_container(bytes(data))
        assert info.value.offset == pix

    def test_duplicate_ring(self):
        data = bytearray(write_container([make_exam()]))
        second = FIRST_RING + 12 + 4 * 96
        data[second:second + 4] = struct.pack("<f", 3.5)
        with pytest.raises(DuplicateRingError) as info:
            parse_container(bytes(data))
        assert info.value.offset == second

    def test_trailing_bytes(self):
        with pytest.raises(InvalidFieldError, match="trailing"):
            parse_container(write_container([make_exam()]) + b"\0")

    def test_errors_are_distinct(self):
        kinds = {BadMagicError, UnsupportedVersionError, TruncatedError, NaNPixelError, DuplicateRingError}
        assert len(kinds) == 5
        assert all(issubclass(k, ValueError) for k in kinds)

    def test_raster_validation(self):
        with pytest.raises(ValueError):
            RasterImage(np.full((2, 2), 1.5, np.float32))
        with pytest.raises(ValueError):
            RasterImage(np.full((2, 2), np.nan, np.float32))


class TestSplit:
    def test_exact_division(self, rng):
        exams = random_exams(rng, 10)
        tr, va, te = split_by_patient(exams, seed=1)
        assert (len(tr.patients), len(va.patients), len(te.patients)) == (6, 2, 2)
        assert len(tr) + len(va) + len(te) == len(exams)

    def test_exclusive_and_deterministic(self, rng):
        exams = random_exams(rng, 17)
        a = split_by_patient(exams, seed=4)
        b = split_by_patient(exams, seed=4)
        assert [p.ids for p in a] == [p.ids for p in b]
        assert not (a[0].patients & a[1].patients or a[0].patients & a[2].patients or a[1].patients & a[2].patients)

    def test_seed_changes_split(self, rng):
        exams = random_exams(rng, 30)
        assert split_by_patient(exams, seed=1)[0].patients != split_by_patient(exams, seed=2)[0].patients

    def test_too_few_patients(self, rng):
        with pytest.raises(ValueError, match="patients"):
            split_by_patient(random_exams(rng, 2))

    def test_bad_ratios(self, rng):
        with pytest.raises(ValueError):
            split_by_patient(random_exams(rng, 5), (0.5, 0.5, 0.5))


class TestReliabilityPolicy:
    def _parts(self, rng):
        exams = random_exams(rng, 10)
        return split_by_patient(exams, seed=0)

    def test_val_filtered_train_kept(self, rng):
        parts = self._parts(rng)
        out = apply_reliability_policy(parts)
        assert out[0] is parts[0]
        for before, after in zip(parts[1:], out[1:]):
            assert all(e.vf.fp <= 0.15 and e.vf.fn <= 0.33 and e.vf.fl <= 0.20 for e in after.exams)
            assert set(after.ids) <= set(before.ids)

    def test_specific_exam(self):
        bad = make_exam(fp=0.20, patient_id=1)
        ok = [make_exam(patient_id=p) for p in (2, 3, 4, 5)]
        from octvf.oct_ingest import Partition

        train = Partition("train", (bad,), ("a",))
        val = Partition("val", (bad, ok[0]), ("b", "c"))
        out = apply_reliability_policy([train, val])
        assert out[0].exams == (bad,)
        assert out[1].ids == ("c",)

    def test_all_reliable_noop(self, rng):
        exams = [make_exam(rng, patient_id=p) for p in range(6)]
        parts = split_by_patient(exams, seed=0)
        assert [p.ids for p in apply_reliability_policy(parts)] == [p.ids for p in parts]


class TestManifests:
    def test_round_trip(self, rng, tmp_path):
        exams = random_exams(rng, 6)
        tr, _, _ = split_by_patient(exams, seed=0)
        write_manifest(tr, tmp_path / "train.ids")
        ids = read_manifest(tmp_path / "train.ids")
        assert ids == list(tr.ids)
        assert select(exams, ids) == list(tr.exams)

    def test_duplicate_keys_disambiguated(self):
        e = make_exam()
        assert exam_ids([e, e]) == [e.exam_key, e.exam_key + "#1"]

    def test_unknown_id(self, rng):
        with pytest.raises(KeyError):
            select(random_exams(rng, 2), ["nope"])


class TestIngest:
    def _write_csv(self, path, rows):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(VF_CSV_COLUMNS)
            w.writerows(rows)

    def _row(self, pid=7, eye="OS", when="1500000000", fill="20"):
        g = grid_24_2()
        cells = ["" if i in g.blind_spot_indices else fill for i in range(54)]
        cells[0] = "<0"
        cells[1] = "-1"
        return [pid, eye, when, "-2.5", "0.1", "0.05", "0.0"] + cells

    def test_read_vf_csv(self, tmp_path):
        self._write_csv(tmp_path / "vf.csv", [self._row(), self._row(8, "OD", "2017-07-14T02:40:00Z")])
        a, b = read_vf_csv(tmp_path / "vf.csv")
        assert a.thresholds[0] == 0 and a.thresholds[1] == 0 and a.thresholds[2] == 20
        assert a.eye == "OS" and a.patient_id == 7 and a.md == pytest.approx(-2.5)
        assert int(b.exam_time.timestamp()) == 1500000000

    def test_blind_spot_must_be_empty(self, tmp_path):
        row = self._row()
        row[7 + grid_24_2().blind_spot_indices[0]] = "5"
        self._write_csv(tmp_path / "vf.csv", [row])
        with pytest.raises(ValueError, match="vf.csv:2"):
            read_vf_csv(tmp_path / "vf.csv")

    def test_ingest_npy_and_png(self, tmp_path, rng):
        from PIL import Image

        self._write_csv(tmp_path / "vf.csv", [self._row()])
        stem = "7_OS_1500000000"
        for m in ("ring3.5", "ring4.1", "ring4.7"):
            np.save(tmp_path / f"{stem}_{m}.npy", rng.random((8, 12)).astype(np.float32))
        Image.fromarray(np.full((6, 6), 255, np.uint8)).save(tmp_path / f"{stem}_slo.png")
        (e,) = ingest(str(tmp_path / "vf.csv"), str(tmp_path))
        assert e.image("ring4.7").pixels.shape == (8, 12)
        assert np.all(e.slo.pixels == 1.0)
        assert parse_container(write_container([e])) == [e]

    def test_ingest_missing_image(self, tmp_path):
        self._write_csv(tmp_path / "vf.csv", [self._row()])
        with pytest.raises(FileNotFoundError, match="ring3.5"):
            ingest(str(tmp_path / "vf.csv"), str(tmp_path))
