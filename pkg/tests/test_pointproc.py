import math
import warnings

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from psdetect.pointproc import (
    BandwidthWarning,
    HardcoreModel,
    InfeasibleHardcoreError,
    IntensityFitError,
    IntensityModel,
    PointPattern,
    RankDeficiencyError,
    ResidualSmoother,
    build_quadrature,
    default_bandwidth_grid,
    fit_hardcore,
    fit_intensity,
    integrated_intensity,
    loocv_objective,
    read_points_csv,
    sample_binomial_ipp,
    sample_hardcore,
    sample_ipp,
    select_bandwidth_loocv,
    smoothed_residual_field,
    write_points_csv,
)
from psdetect.randfield import GridField, MaternParams, simulate_field


def quadrant_counts(points):
    left = points[:, 0] < 0.5
    low = points[:, 1] < 0.5
    return np.array([(left & low).sum(), (left & ~low).sum(), (~left & low).sum(), (~left & ~low).sum()])


def halves_field(r=64, hi=10.0, lo=-10.0):
    x = np.linspace(0, 1, r)
    return GridField(np.where(x[:, None] < 0.5, hi, lo) * np.ones((1, r)))


class TestPointPattern:
    def test_validation(self):
        with pytest.raises(ValueError):
            PointPattern([[0.5, 1.2]])
        with pytest.raises(ValueError):
            PointPattern([[0.5, 0.5]], marks=[1.0, 2.0])

    def test_empty_allowed(self):
        assert PointPattern(np.empty((0, 2))).n == 0

    def test_equality_and_without(self):
        p = PointPattern([[0.1, 0.2], [0.3, 0.4]], 2, [1.0, 2.0])
        assert p == PointPattern([[0.1, 0.2], [0.3, 0.4]], 2, [1.0, 2.0])
        q = p.without(0)
        assert q.n == 1 and q.marks[0] == 2.0 and q.time_index == 2


class TestIntensityModel:
    def test_coefficient_count(self):
        with pytest.raises(ValueError):
            IntensityModel(0.0, (1.0, 2.0), (GridField.constant(0.0, 4),))

    def test_integrated_constant(self):
        assert integrated_intensity(IntensityModel.constant(50.0)) == pytest.approx(50.0, rel=1e-12)

    def test_integrated_matches_fine_quadrature(self, rng):
        z = simulate_field(MaternParams(1.0, 1.0, 0.3), 16, rng)
        m = IntensityModel(1.0, (1.5,), (z,))
        g = (np.arange(800) + 0.5) / 800
        xx, yy = np.meshgrid(g, g, indexing="ij")
        brute = m.intensity(np.column_stack([xx.ravel(), yy.ravel()])).mean()
        assert integrated_intensity(m) == pytest.approx(brute, rel=1e-5)


class TestBinomialSampler:
    def test_quadrants(self, rng):
        p = sample_binomial_ipp(IntensityModel.constant(1.0), 10_000, rng)
        assert p.n == 10_000
        assert np.all(np.abs(quadrant_counts(p.points) - 2500) <= 3 * math.sqrt(2500 * 0.75))

    def test_strong_contrast(self, rng):
        m = IntensityModel(0.0, (1.0,), (halves_field(),))
        for _ in range(20):
            p = sample_binomial_ipp(m, 100, rng)
            assert (p.points[:, 0] < 0.5).sum() >= 99

    def test_density_follows_intensity(self, rng):
        # within a single cell the bilinear density is recovered (chi-square over strips)
        f = GridField(np.array([[0.0, 0.0], [2.0, 2.0]]))  # log-lambda = 2x
        p = sample_binomial_ipp(IntensityModel(0.0, (1.0,), (f,)), 20_000, rng)
        edges = np.linspace(0, 1, 11)
        obs = np.histogram(p.points[:, 0], edges)[0]
        expected = np.diff(np.exp(2 * edges)) / (math.exp(2) - 1) * p.n
        chi2 = ((obs - expected) ** 2 / expected).sum()
        assert chi2 < 27.9  # 0.999 quantile, 9 dof

    def test_determinism(self):
        m = IntensityModel(0.0, (1.0,), (halves_field(hi=1.0, lo=0.0),))
        a = sample_binomial_ipp(m, 50, np.random.default_rng(9))
        b = sample_binomial_ipp(m, 50, np.random.default_rng(9))
        assert a == b

    def test_zero_intensity(self, rng):
        with pytest.raises(ValueError):
            sample_binomial_ipp(IntensityModel.constant(0.0), 10, rng)


class TestPoissonSampler:
    def test_mean_and_independence(self, rng):
        m = IntensityModel.constant(50.0)
        counts = np.empty(10_000)
        left = np.empty(10_000)
        for i in range(counts.size):
            p = sample_ipp(m, rng)
            counts[i] = p.n
            left[i] = (p.points[:, 0] < 0.5).sum()
        assert abs(counts.mean() - 50) < 3 * math.sqrt(50 / counts.size)
        assert abs(np.corrcoef(left, counts - left)[0, 1]) < 0.03

    def test_zero_gives_empty(self, rng):
        assert sample_ipp(IntensityModel.constant(0.0), rng).n == 0


class TestHardcore:
    def test_packing_bound(self):
        with pytest.raises(InfeasibleHardcoreError):
            HardcoreModel(0.2, 100)

    def test_initialisation_failure(self, rng):
        with pytest.raises(InfeasibleHardcoreError, match="restarts"):
            sample_hardcore(HardcoreModel(0.21, 26, burn_in_sweeps=1), rng, max_restarts=5)

    def test_min_distance(self, rng):
        for r in (0.025, 0.05):
            p = sample_hardcore(HardcoreModel(r, 100, burn_in_sweeps=200), rng)
            assert p.n == 100 and pdist(p.points).min() > r

    def test_zero_radius_uniform(self, rng):
        counts = np.zeros(4)
        for _ in range(100):
            counts += quadrant_counts(sample_hardcore(HardcoreModel(0.0, 100, burn_in_sweeps=50), rng).points)
        assert np.all(np.abs(counts - 2500) <= 3 * math.sqrt(2500 * 0.75))

    def test_inhibition_increases_nn_distance(self):
        from psdetect.nnstats import knn_mean_distances

        wins = 0
        for i in range(500):
            a = sample_hardcore(HardcoreModel(0.05, 100, burn_in_sweeps=100), np.random.default_rng(i))
            b = sample_hardcore(HardcoreModel(0.0, 100, burn_in_sweeps=100), np.random.default_rng(10_000 + i))
            wins += knn_mean_distances(a, 1).mean_distances.mean() > knn_mean_distances(b, 1).mean_distances.mean()
        assert wins == 500

    def test_inhomogeneous_first_order(self, rng):
        m = HardcoreModel(0.02, 60, IntensityModel(0.0, (1.0,), (halves_field(hi=3.0, lo=0.0),)), burn_in_sweeps=500)
        left = [np.mean(sample_hardcore(m, rng).points[:, 0] < 0.5) for _ in range(20)]
        assert np.mean(left) > 0.8

    def test_fit_hardcore(self, rng):
        p = sample_hardcore(HardcoreModel(0.05, 80, burn_in_sweeps=200), rng)
        hc = fit_hardcore(p)
        assert hc.radius == pytest.approx(pdist(p.points).min())
        assert hc.n == 80 and hc.intensity.intercept == pytest.approx(math.log(80))


class TestQuadrature:
    def test_weights_sum_to_area(self, rng):
        p = PointPattern(rng.random((137, 2)))
        q = build_quadrature(p, 64)
        assert abs(q.total_weight - 1.0) < 1e-12
        assert np.all(q.weights > 0)
        assert q.is_data.sum() == 137


class TestFitIntensity:
    def test_hpp(self, rng):
        p = sample_binomial_ipp(IntensityModel.constant(1.0), 200, rng)
        f = fit_intensity(p)
        assert f.model.intercept == pytest.approx(math.log(200), abs=1e-9)
        assert abs(f.model.intercept - math.log(200)) < 0.2

    def test_recovery(self):
        w = simulate_field(MaternParams(1.0, 1.0, 0.5), 64, np.random.default_rng(1))
        truth = IntensityModel(0.0, (1.0,), (w,))
        est = []
        for i in range(200):
            p = sample_binomial_ipp(truth, 250, np.random.default_rng(100 + i))
            est.append(fit_intensity(p, (w,)).model.coefficients[0])
        assert abs(np.mean(est) - 1.0) < 0.15

    def test_loglik_monotone(self, rng):
        w = simulate_field(MaternParams(1.0, 1.0, 0.3), 64, rng)
        p = sample_binomial_ipp(IntensityModel(0.0, (2.0,), (w,)), 150, rng)
        f = fit_intensity(p, (w,))
        assert np.all(np.diff(f.loglik_trace) >= 0)
        assert f.iterations >= 2

    def test_rank_deficiency(self, rng):
        w = simulate_field(MaternParams(1.0, 1.0, 0.3), 64, rng)
        p = sample_binomial_ipp(IntensityModel.constant(1.0), 50, rng)
        with pytest.raises(RankDeficiencyError):
            fit_intensity(p, (w, w))

    def test_separation_guard(self, rng):
        x = np.linspace(0, 1, 64)
        w = GridField(np.where(x[:, None] < 0.5, 0.0, -1.0) * np.ones((1, 64)))
        pts = rng.random((60, 2)) * [0.45, 1.0]
        with pytest.raises(IntensityFitError) as err:
            fit_intensity(PointPattern(pts), (w,))
        assert np.isfinite(err.value.grad_norm)

    def test_non_convergence_reports_gradient(self, rng):
        w = simulate_field(MaternParams(1.0, 1.0, 0.3), 64, rng)
        p = sample_binomial_ipp(IntensityModel(0.0, (2.0,), (w,)), 100, rng)
        with pytest.raises(IntensityFitError) as err:
            fit_intensity(p, (w,), max_iter=1)
        assert err.value.grad_norm > 0

    def test_json(self, rng):
        import json

        f = fit_intensity(PointPattern(rng.random((30, 2))))
        d = json.loads(f.to_json())
        assert d["quadrature_resolution"] == 64 and d["n_points"] == 30


class TestResiduals:
    def test_empty_pattern(self):
        f = smoothed_residual_field(PointPattern(np.empty((0, 2))), IntensityModel.constant(7.0), 0.1)
        np.testing.assert_allclose(f.values, -7.0, rtol=1e-12)

    def test_large_bandwidth_limit(self, rng):
        p = PointPattern(rng.random((40, 2)))
        m = IntensityModel.constant(25.0)
        lam_total = float(np.outer(*(2 * [np.r_[0.5, np.ones(62), 0.5] / 63])).sum() * 25.0)
        f = smoothed_residual_field(p, m, 1e4)
        np.testing.assert_allclose(f.values, 40 - lam_total, rtol=1e-6)

    def test_mean_zero_under_truth(self, rng):
        m = IntensityModel.constant(100.0)
        acc = []
        for _ in range(500):
            acc.append(smoothed_residual_field(sample_ipp(m, rng), m, 0.1).values[::9, ::9])
        acc = np.array(acc)
        mean, se = acc.mean(axis=0), acc.std(axis=0, ddof=1) / math.sqrt(len(acc))
        assert np.all(np.abs(mean) < 3 * se)

    def test_field_matches_pointwise(self, rng):
        p = PointPattern(rng.random((30, 2)))
        sm = ResidualSmoother(IntensityModel.constant(30.0), 0.07)
        f = sm.field(p)
        np.testing.assert_allclose(sm.at(f.nodes(), p), f.values.ravel(), atol=1e-10)

    def test_rejects_bad_bandwidth(self):
        with pytest.raises(ValueError):
            ResidualSmoother(IntensityModel.constant(1.0), 0.0)


class TestBandwidth:
    def test_loocv_matches_literal_deletion(self, rng):
        pts = rng.random((5, 2))
        p = PointPattern(pts)
        fitted = fit_intensity(p)
        for h in (0.03, 0.1, 0.3):
            sm = ResidualSmoother(fitted, h)
            loo = sum(float(sm.at(pts[i : i + 1], p.without(i))[0]) for i in range(p.n))
            field_ = sm.field(p).values
            tile = np.outer(sm.w1, sm.w1)
            lam = np.exp(fitted.model.log_lattice())
            brute = (tile * field_**2).sum() - 2 * (loo - (tile * field_ * lam).sum())
            assert loocv_objective(p, fitted, h) == pytest.approx(brute, abs=1e-9)

    def test_single_candidate(self, rng):
        p = PointPattern(rng.random((10, 2)))
        assert select_bandwidth_loocv(p, fit_intensity(p), [0.123]) == 0.123

    def test_degenerate_grid_warns(self, rng):
        p = PointPattern(rng.random((10, 2)))
        with pytest.warns(BandwidthWarning):
            assert select_bandwidth_loocv(p, fit_intensity(p), [0.2, 0.2, 0.2]) == 0.2

    def test_needs_three_points(self):
        p = PointPattern([[0.1, 0.1], [0.5, 0.5]])
        with pytest.raises(ValueError):
            select_bandwidth_loocv(p, fit_intensity(p))

    def test_default_grid(self):
        g = default_bandwidth_grid(64)
        assert len(g) == 10 and g[0] == pytest.approx(0.5 / 63) and g[-1] == pytest.approx(0.25)

    def test_clustered_gets_smaller_bandwidth(self):
        smaller = 0
        for i in range(100):
            rng = np.random.default_rng(i)
            centres = rng.random((8, 2))
            clustered = np.clip(centres[rng.integers(0, 8, 80)] + 0.01 * rng.standard_normal((80, 2)), 0, 1)
            diffuse = rng.random((80, 2))
            hc = select_bandwidth_loocv(PointPattern(clustered), fit_intensity(PointPattern(clustered)))
            hd = select_bandwidth_loocv(PointPattern(diffuse), fit_intensity(PointPattern(diffuse)))
            smaller += hc < hd
        assert smaller > 50


class TestPointsCsv:
    def test_round_trip(self, tmp_path, rng):
        pats = [PointPattern(rng.random((5, 2)), 1, rng.random(5)), PointPattern(rng.random((3, 2)), 0, rng.random(3))]
        path = tmp_path / "p.csv"
        write_points_csv(pats, path)
        back = read_points_csv(path)
        assert [p.time_index for p in back] == [0, 1]
        assert back[0] == pats[1] and back[1] == pats[0]

    def test_errors_are_line_numbered(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y,t,mark\n0.1,0.2,0,1.0\n0.3,abc,0,2.0\n")
        with pytest.raises(ValueError, match=r":3"):
            read_points_csv(path)

    def test_outside_square(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y,t\n0.1,1.5,0\n")
        with pytest.raises(ValueError, match=r":2"):
            read_points_csv(path)

    def test_empty(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(ValueError):
            read_points_csv(path)


@pytest.mark.slow
def test_preferential_points_cluster_where_estimate_is_high():
    """Points with positive latent estimates have shorter NN distances (gamma > 0)."""
    from psdetect.latent import fit_kriging
    from psdetect.nnstats import knn_mean_distances
    from psdetect.simstudy import ExperimentSpec, simulate_dataset

    spec = ExperimentSpec(n=100, gamma=1.0, rho_z=1.0, replicates=50)
    hits = 0
    for r in range(200):
        pat, _, _ = simulate_dataset(spec, np.random.default_rng(1000 + r))
        zh = fit_kriging(pat).predictor(pat).z_at(pat.points)
        d = knn_mean_distances(pat, 1).mean_distances
        hits += bool((zh > 0).any() and (zh < 0).any() and d[zh > 0].mean() < d[zh < 0].mean())
    assert hits >= 0.95 * 200
