import io

import numpy as np
import pytest
from conftest import make_vf

from octvf.vf_domain import (
    DEFAULT_LIMITS, N_ACTIVE, SECTORS, RetestCITable, SectorMap, SectorMapError, VFError, clamp_threshold,
    default_sector_assignment, grid_24_2, load_retest_ci, load_sector_map, mirror_exam, normalize_laterality,
    passes_reliability,
)

# Standard 24-2 chart, right eye, read top row to bottom row, left to right.
CHART_OD = [
    [(-9, 21), (-3, 21), (3, 21), (9, 21)],
    [(-15, 15), (-9, 15), (-3, 15), (3, 15), (9, 15), (15, 15)],
    [(-21, 9), (-15, 9), (-9, 9), (-3, 9), (3, 9), (9, 9), (15, 9), (21, 9)],
    [(-27, 3), (-21, 3), (-15, 3), (-9, 3), (-3, 3), (3, 3), (9, 3), (15, 3), (21, 3)],
    [(-27, -3), (-21, -3), (-15, -3), (-9, -3), (-3, -3), (3, -3), (9, -3), (15, -3), (21, -3)],
    [(-21, -9), (-15, -9), (-9, -9), (-3, -9), (3, -9), (9, -9), (15, -9), (21, -9)],
    [(-15, -15), (-9, -15), (-3, -15), (3, -15), (9, -15), (15, -15)],
    [(-9, -21), (-3, -21), (3, -21), (9, -21)],
]


class TestGrid:
    def test_counts(self):
        g = grid_24_2()
        assert len(g.points) == 54
        assert len(g.active_indices) == 52
        assert len(g.blind_spot_indices) == 2

    def test_layout_matches_chart_in_documented_order(self):
        g = grid_24_2()
        assert [(p.x_deg, p.y_deg) for p in g.points] == [xy for row in CHART_OD for xy in row]
        assert {(p.x_deg, p.y_deg) for p in g.points if p.blind_spot} == {(15, 3), (15, -3)}

    def test_symmetric_about_horizontal_meridian(self):
        pts = {(p.x_deg, p.y_deg) for p in grid_24_2().points}
        assert all((x, -y) in pts for x, y in pts)

    def test_left_eye_blind_spot_on_other_side(self):
        g = grid_24_2("OS")
        assert {(p.x_deg, p.y_deg) for p in g.points if p.blind_spot} == {(-15, 3), (-15, -3)}

    def test_order_stable(self):
        assert grid_24_2() == grid_24_2()

    def test_to_active_and_back(self):
        g = grid_24_2()
        full = np.arange(54, dtype=float)
        act = g.to_active(full)
        assert act.shape == (52,)
        back = g.to_full(act)
        assert np.isnan(back[list(g.blind_spot_indices)]).all()
        np.testing.assert_array_equal(back[list(g.active_indices)], act)


class TestExam:
    def test_sentinel_clamped_to_zero(self):
        t = np.full(N_ACTIVE, 10.0)
        t[3] = -1
        assert make_vf(t).thresholds[3] == 0

    def test_rejects_out_of_range(self):
        t = np.full(N_ACTIVE, 10.0)
        t[0] = 51
        with pytest.raises(VFError):
            make_vf(t)
        with pytest.raises(VFError):
            make_vf(fp=1.2)
        with pytest.raises(VFError):
            make_vf(np.ones(50))

    def test_clamp_threshold(self):
        assert clamp_threshold(-1) == 0
        assert clamp_threshold(12.5) == 12.5

    def test_thresholds_read_only(self):
        e = make_vf()
        with pytest.raises(ValueError):
            e.thresholds[0] = 1


class TestReliability:
    def test_boundary_passes(self):
        assert passes_reliability(make_vf(fp=0.15, fn=0.33, fl=0.20), DEFAULT_LIMITS)

    @pytest.mark.parametrize("kw", [{"fp": 0.16}, {"fn": 0.34}, {"fl": 0.21}])
    def test_single_exceedance_fails(self, kw):
        assert not passes_reliability(make_vf(**kw))

    def test_all_zero_passes(self):
        assert passes_reliability(make_vf())

    def test_limits_out_of_range(self):
        with pytest.raises(VFError):
            passes_reliability(make_vf(), {"fp_max": 1.5})


class TestMirror:
    def test_involution(self, rng):
        e = make_vf(rng.uniform(0, 35, N_ACTIVE))
        assert mirror_exam(mirror_exam(e)) == e

    def test_indices_unchanged_and_eye_toggled(self, rng):
        e = make_vf(rng.uniform(0, 35, N_ACTIVE), md=-4.5, fp=0.1)
        m = mirror_exam(e)
        assert m.eye == "OS" and m.md == e.md and m.fp == e.fp
        assert sorted(m.thresholds) == sorted(e.thresholds)

    def test_value_moves_to_mirrored_coordinate(self, rng):
        e = make_vf(rng.uniform(0, 35, N_ACTIVE))
        m = mirror_exam(e)
        for p in grid_24_2("OD").active_points():
            assert m.value_at(-p.x_deg, p.y_deg) == e.value_at(p.x_deg, p.y_deg)

    def test_constant_exam(self):
        e = make_vf(np.full(N_ACTIVE, 27.0))
        np.testing.assert_array_equal(mirror_exam(e).thresholds, e.thresholds)

    def test_wrong_grid(self):
        with pytest.raises(VFError):
            mirror_exam(make_vf(), grid_24_2("OS"))

    def test_normalize_laterality(self):
        od = make_vf()
        assert normalize_laterality(od) is od
        assert normalize_laterality(mirror_exam(od)).eye == "OD"


def _csv(assignment):
    return io.StringIO("point_index,sector\n" + "".join(f"{i},{s}\n" for i, s in assignment))


class TestSectorMap:
    def test_bundled_default(self):
        m = load_sector_map()
        sizes = m.sizes()
        assert set(sizes) == set(SECTORS)
        assert sum(sizes.values()) == 52
        assert all(v > 0 for v in sizes.values())
        assert m.assignment == default_sector_assignment()

    def test_partition(self):
        m = load_sector_map()
        idx = np.concatenate([m.indices(s) for s in SECTORS])
        assert sorted(idx) == list(range(52))

    def test_missing_index(self):
        rows = list(enumerate(default_sector_assignment()))[:-1]
        with pytest.raises(SectorMapError, match="unassigned point 51"):
            load_sector_map(_csv(rows))

    def test_unknown_label_names_row(self):
        rows = list(enumerate(default_sector_assignment()))
        rows[7] = (7, "Macular")
        with pytest.raises(SectorMapError, match="unknown sector") as info:
            load_sector_map(_csv(rows))
        assert "Macular" in str(info.value)

    def test_empty_sector(self):
        with pytest.raises(SectorMapError, match="empty sector"):
            SectorMap(("Central",) * 52)


class TestRetest:
    def test_bundled_table_valid(self):
        t = load_retest_ci()
        assert np.all(t.lower_db <= t.upper_db)
        assert t.measured_db[0] == 0 and t.measured_db[-1] == 40

    def test_nearest_row(self):
        t = RetestCITable(np.array([0.0, 10.0, 20.0]), np.array([0.0, 5.0, 15.0]), np.array([3.0, 12.0, 22.0]))
        assert t.row_for(4.0) == (0.0, 3.0)
        assert t.row_for(5.0) == (0.0, 3.0)  # tie goes low
        assert t.row_for(16.0) == (15.0, 22.0)
        with pytest.raises(VFError):
            t.row_for(21.0)

    def test_invalid(self):
        with pytest.raises(VFError):
            RetestCITable(np.array([0.0, 1.0]), np.array([2.0, 0.0]), np.array([1.0, 1.0]))
        with pytest.raises(VFError):
            RetestCITable(np.array([1.0, 1.0]), np.zeros(2), np.ones(2))
