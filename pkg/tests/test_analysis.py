import numpy as np
import pytest

from octvf.evaluation.analysis import (
    bin_by_measured, evaluate, pointwise_r_map, retest_coverage, sector_metrics,
)
from octvf.evaluation.metrics import MetricError
from octvf.vf_domain import N_ACTIVE, SECTORS, RetestCITable, grid_24_2, load_sector_map


class TestEvaluate:
    def test_perfect(self, rng):
        y = rng.normal(20, 5, size=(10, N_ACTIVE))
        rep = evaluate(y, y, iterations=50)
        assert rep.r2.value == 1.0 and rep.r2.ci_low == 1.0 and rep.mae.value == 0.0
        assert rep.n_samples == 10
        assert rep.sqrt_r2 == 1.0 and rep.mean_point_r == pytest.approx(1.0)

    def test_md_target_vector(self, rng):
        y = rng.normal(-5, 4, 30)
        rep = evaluate(y, y + rng.normal(0, 1, 30), target="md", iterations=100)
        assert rep.r2.ci_low <= rep.r2.value <= rep.r2.ci_high
        assert np.isnan(rep.sqrt_r2)

    def test_count_mismatch(self):
        with pytest.raises(MetricError, match="3 measured rows vs 2 predicted"):
            evaluate(np.zeros((3, N_ACTIVE)), np.zeros((2, N_ACTIVE)))


class TestPointwise:
    def test_identity_and_coords(self, rng):
        y = rng.normal(size=(6, N_ACTIVE))
        pm = pointwise_r_map(y, y)
        np.testing.assert_allclose(pm.values, 1.0)
        np.testing.assert_array_equal(pm.coords, grid_24_2().active_coords())

    def test_column_shuffle_changes_map(self, rng):
        y = rng.normal(size=(8, N_ACTIVE))
        p = y + rng.normal(0, 0.5, y.shape)
        shuffled = p[:, rng.permutation(N_ACTIVE)]
        assert not np.allclose(pointwise_r_map(y, p).values, pointwise_r_map(y, shuffled).values)

    def test_constant_column_flagged(self, rng):
        y = rng.normal(size=(5, N_ACTIVE))
        y[:, 7] = 3.0
        pm = pointwise_r_map(y, y)
        assert pm.undefined[7] and pm.undefined.sum() == 1
        assert np.isnan(pm.values[7])

    def test_needs_two_exams(self):
        with pytest.raises(MetricError):
            pointwise_r_map(np.zeros((1, N_ACTIVE)), np.zeros((1, N_ACTIVE)))


class TestSectors:
    def test_perfect(self, rng):
        y = rng.normal(20, 5, size=(4, N_ACTIVE))
        rows = sector_metrics(y, y, load_sector_map())
        assert [r.sector for r in rows] == list(SECTORS)
        assert len(rows) == 6 and all(r.r2 == 1.0 for r in rows)
        assert sum(r.n_points for r in rows) == N_ACTIVE

    def test_two_exam_fixture(self):
        smap = load_sector_map()
        idx = smap.indices("Temporal")
        y = np.full((2, N_ACTIVE), 25.0)
        y[0, idx], y[1, idx] = 10.0, 20.0
        p = y + 1.0
        rows = {r.sector: r for r in sector_metrics(y, p, smap)}
        # Temporal values {10, 20}: mean 15, every |y - mean| = 5
        assert rows["Temporal"].mae_baseline == 5.0
        assert rows["Temporal"].mae == 1.0
        # residual 1 against deviations of 5: R2 = 1 - 1/25
        assert rows["Temporal"].r2 == pytest.approx(1 - 1 / 25, abs=1e-12)
        assert rows["Central"].mae_baseline == 0.0 and np.isnan(rows["Central"].r2)


class TestBins:
    def test_example(self):
        b = bin_by_measured([10, 10.5, 12], [1, 2, 3])
        assert b.count[5] == 2 and b.count[6] == 1 and b.count.sum() == 3
        assert len(b.count) == 20 and b.edges[0] == 0 and b.edges[-1] == 40

    def test_constant_predictions(self, rng):
        y = rng.uniform(0, 40, 200)
        b = bin_by_measured(y, np.full(200, 7.5))
        pop = b.populated
        assert np.all(b.p5[pop] == 7.5) and np.all(b.p95[pop] == 7.5)
        assert np.all(np.isnan(b.median[~pop]))

    def test_order_statistics_match_sort_oracle(self):
        vals = np.array([9.0, 1.0, 5.0, 3.0, 7.0])
        b = bin_by_measured(np.full(5, 20.5), vals)
        s = np.sort(vals)
        # linear interpolation at position q*(n-1) in the sorted sample
        def q(frac):
            pos = frac * 4
            lo = int(np.floor(pos))
            return s[lo] + (pos - lo) * (s[min(lo + 1, 4)] - s[lo])
        k = 10
        assert (b.p5[k], b.q25[k], b.median[k], b.q75[k], b.p95[k]) == pytest.approx(
            (q(0.05), q(0.25), q(0.5), q(0.75), q(0.95)), abs=1e-12)

    def test_edges_and_outside(self):
        b = bin_by_measured([0.0, 40.0, 41.0, -0.5], [1, 2, 3, 4])
        assert b.count[0] == 1 and b.count[-1] == 1 and b.outside == 2

    def test_bad_step(self):
        with pytest.raises(ValueError):
            bin_by_measured([1.0], [1.0], step=0)


class TestCoverage:
    def test_universal_cover(self, rng):
        y = rng.uniform(0, 40, 500)
        b = bin_by_measured(y, np.clip(y + rng.normal(0, 3, 500), 0, 50))
        ci = RetestCITable(np.arange(0.0, 51.0), np.zeros(51), np.full(51, 50.0))
        inside, total, frac = retest_coverage(b, ci)
        assert frac == 1.0 and total == 2 * int(b.populated.sum())

    def test_zero_width_counts_exact_hits_only(self):
        b = bin_by_measured([1.0, 1.5, 5.0], [1.0, 1.0, 4.0])
        levels = np.arange(0.0, 41.0)
        ci = RetestCITable(levels, levels, levels)
        # bin [0,2) centre 1: p5=p95=1 -> both hit; bin [4,6) centre 5: p5=p95=4 -> miss
        assert retest_coverage(b, ci) == (2, 4, 0.5)

    def test_nineteen_bins_give_38_whiskers(self):
        y = np.arange(19) * 2 + 1.0
        b = bin_by_measured(y, y)
        ci = RetestCITable(np.arange(0.0, 51.0), np.zeros(51), np.full(51, 50.0))
        assert retest_coverage(b, ci)[1] == 38
