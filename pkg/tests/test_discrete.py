import numpy as np
import pytest
from scipy.stats import chisquare

from psdetect.discrete import (
    ArealParseError,
    ArealPopulation,
    SelectionFitError,
    SelectionModel,
    _draw_selection,
    estimate_unit_z,
    fit_selection,
    read_areal_csv,
    run_discrete_test,
    write_areal_csv,
)
from psdetect.pointproc import IntensityModel
from psdetect.pstest import TestConfig, run_nn_test
from psdetect.randfield import MaternParams, simulate_field


def grid_centroids(side):
    c = (np.arange(side) + 0.5) / side
    cx, cy = np.meshgrid(c, c, indexing="ij")
    return np.column_stack([cx.ravel(), cy.ravel()])


def population(selected, marks=None, side=10, **kw):
    cent = grid_centroids(side)
    n = side * side
    selected = np.asarray(selected, dtype=bool)
    if marks is None:
        marks = np.where(selected, 0.0, np.nan)
    return ArealPopulation(None, cent, np.full(n, 1.0 / n), selected, marks, **kw)


def preferential_population(rng, gamma, side=10, rho=0.5):
    z = simulate_field(MaternParams(1.0, 1.0, rho), 64, rng)
    cent = grid_centroids(side)
    zb = z(cent)
    sel = rng.random(zb.size) < 1.0 / (1.0 + np.exp(-gamma * zb))
    marks = np.where(sel, zb + 0.1 * rng.standard_normal(zb.size), np.nan)
    return ArealPopulation(None, cent, np.full(zb.size, 1.0 / zb.size), sel, marks), zb


class TestPopulation:
    def test_marks_of_unselected_are_dropped(self):
        pop = population([True, False] * 50, marks=np.arange(100.0))
        assert np.isnan(pop.marks[1]) and pop.marks[0] == 0.0
        assert pop.n_selected == 50

    def test_selected_needs_mark(self):
        with pytest.raises(ValueError, match="mark"):
            population([True] * 100, marks=np.full(100, np.nan))

    def test_centroid_outside_region(self):
        with pytest.raises(ValueError):
            ArealPopulation(None, [[1.5, 0.5]], [1.0], [False], [np.nan])

    def test_selected_pattern(self):
        sel = np.zeros(100, bool)
        sel[[3, 7]] = True
        pat = population(sel).selected_pattern()
        assert pat.n == 2
        np.testing.assert_allclose(pat.points, grid_centroids(10)[[3, 7]])


class TestFitSelection:
    def test_intercept_only_matches_proportion(self):
        sel = np.zeros(100, bool)
        sel[:40] = True
        model = fit_selection(population(sel))
        assert 1 / (1 + np.exp(-model.intercept)) == pytest.approx(0.4, abs=1e-8)

    def test_coefficient_recovery(self):
        # 200 simulated selections; the mean estimate must sit within 2 Monte Carlo s.e. of the truth
        rng = np.random.default_rng(11)
        n_units, reps = 2500, 200
        side = 50
        truth = np.array([-0.5, 0.8, -0.6])
        est = []
        for _ in range(reps):
            w = rng.standard_normal((n_units, 1))
            x = rng.standard_normal((n_units, 1))
            eta = truth[0] + truth[1] * w[:, 0] + truth[2] * x[:, 0]
            sel = rng.random(n_units) < 1 / (1 + np.exp(-eta))
            m = fit_selection(population(sel, side=side, w=w, x=x), include=("w1", "x1"))
            est.append([m.intercept, *m.alpha, *m.delta])
        est = np.array(est)
        se = est.std(axis=0, ddof=1) / np.sqrt(reps)
        err = np.abs(est.mean(axis=0) - truth)
        assert np.all(err[1:] < 2 * se[1:]), (est.mean(axis=0), se)
        # intercept is a nuisance here; three simultaneous 2 s.e. bands fail by chance too often
        assert err[0] < 3 * se[0], (est.mean(axis=0), se)

    def test_all_selected_is_an_error(self):
        with pytest.raises(SelectionFitError):
            fit_selection(population(np.ones(100, bool)))

    def test_none_selected_is_an_error(self):
        with pytest.raises(SelectionFitError):
            fit_selection(population(np.zeros(100, bool)))

    def test_perfect_separation(self):
        w = np.linspace(-1, 1, 100)[:, None]
        with pytest.raises(SelectionFitError):
            fit_selection(population(w[:, 0] > 0, w=w), include=("w1",))

    def test_unknown_column(self):
        with pytest.raises(ValueError):
            fit_selection(population([True, False] * 50), include=("w1",))

    def test_pooled_time_indices(self):
        a = population([True] * 30 + [False] * 70)
        b = population([True] * 50 + [False] * 50)
        m = fit_selection([a, b])
        assert 1 / (1 + np.exp(-m.intercept)) == pytest.approx(0.4, abs=1e-8)


class TestDrawSelection:
    def test_fixed_size(self, rng):
        probs = rng.uniform(0.05, 0.95, 200)
        for _ in range(50):
            assert _draw_selection(probs, 37, rng).sum() == 37

    def test_higher_odds_selected_more_often(self, rng):
        probs = np.r_[np.full(50, 0.2), np.full(50, 0.8)]
        counts = sum(_draw_selection(probs, 20, rng).astype(int) for _ in range(500))
        assert counts[50:].sum() > 3 * counts[:50].sum()

    def test_bernoulli_mean(self, rng):
        probs = np.full(1000, 0.3)
        draws = np.array([_draw_selection(probs, None, rng).mean() for _ in range(200)])
        assert abs(draws.mean() - 0.3) < 0.005


class TestRunDiscrete:
    def test_all_units_selected_gives_p_one(self, rng):
        pop = population(np.ones(100, bool))
        z = rng.standard_normal(100)
        model = SelectionModel(0.0)
        cfg = TestConfig(k_values=(1, 3), m=19, fix_n=True, seed=3)
        rep = run_discrete_test(pop, z, model, cfg)
        assert np.all(rep.p_values == 1.0)
        assert np.all(rep.rho_mc == rep.rho_obs[:, None, :])

    def test_null_calibration(self):
        # uniform selection, i.i.d. latent noise
        rejected = np.zeros(2)
        reps = 200
        for r in range(reps):
            rng = np.random.default_rng(5000 + r)
            pop = population(rng.random(100) < 0.5)
            z = rng.standard_normal(100)
            cfg = TestConfig(k_values=(1, 5), m=19, seed=r)
            rep = run_discrete_test(pop, z, fit_selection(pop), cfg)
            rejected += rep.p_values[0] <= 0.05
        assert np.all(rejected / reps <= 0.081), rejected / reps

    @pytest.mark.slow
    def test_power_smooth_latent(self):
        # logit p = Z on a 10 x 10 grid (about 50 selected units), one-sided
        reps = 100
        rejected = np.zeros(3)
        for r in range(reps):
            rng = np.random.default_rng(10_000 + r)
            pop, _ = preferential_population(rng, 1.0)
            z_hat, _ = estimate_unit_z(pop)
            cfg = TestConfig(k_values=(1, 3, 5), m=19, seed=r, alternative="positive-ps")
            rep = run_discrete_test(pop, z_hat, fit_selection(pop), cfg)
            rejected += rep.p_values[0] <= 0.05
        assert rejected.max() / reps > 0.5, rejected / reps

    def test_uniform_p_with_true_coefficients(self):
        # h = 0 and known selection model: one-sided p is uniform on {1/20, ..., 1}
        reps, m = 400, 19
        ps = []
        for r in range(reps):
            rng = np.random.default_rng(20_000 + r)
            pop = population(rng.random(100) < 0.4)
            cfg = TestConfig(k_values=(2,), m=m, seed=r, alternative="positive-ps")
            rep = run_discrete_test(pop, rng.standard_normal(100), SelectionModel(np.log(0.4 / 0.6)), cfg)
            ps.append(rep.p_values[0, 0])
        counts = np.bincount(np.rint(np.array(ps) * (m + 1)).astype(int), minlength=m + 2)[1:]
        assert chisquare(counts).pvalue > 0.01

    def test_workers_do_not_change_result(self):
        rng = np.random.default_rng(1)
        pop, zb = preferential_population(rng, 1.0)
        cfg = TestConfig(k_values=(1, 3), m=19, seed=9)
        model = fit_selection(pop)
        assert run_discrete_test(pop, zb, model, cfg, workers=1) == run_discrete_test(pop, zb, model, cfg, workers=2)

    def test_wrong_length_latent(self):
        pop = population([True, False] * 50)
        with pytest.raises(ValueError):
            run_discrete_test(pop, np.zeros(99), SelectionModel(0.0), TestConfig())

    def test_residual_statistic_rejected(self):
        pop = population([True, False] * 50)
        with pytest.raises(ValueError):
            run_discrete_test(pop, np.zeros(100), SelectionModel(0.0), TestConfig(statistic="residual"))

    def test_multiple_time_indices(self, rng):
        a = population(rng.random(100) < 0.5)
        b = ArealPopulation(None, a.centroids, a.areas, rng.random(100) < 0.5, np.zeros(100), time_index=1)
        zs = {0: rng.standard_normal(100), 1: rng.standard_normal(100)}
        rep = run_discrete_test([a, b], zs, SelectionModel(0.0), TestConfig(k_values=(1,), seed=2))
        assert rep.p_values.shape == (2, 1)
        assert list(rep.times) == [0, 1]

    @pytest.mark.slow
    def test_agrees_with_point_test_on_fine_lattice(self):
        # one unit per cell of a 30 x 30 lattice versus the continuous-space test on the same centroids
        side, reps = 30, 50
        cent = grid_centroids(side)
        p_areal, p_point = [], []
        for r in range(reps):
            rng = np.random.default_rng(30_000 + r)
            gamma = 2.0 * r / (reps - 1)
            z = simulate_field(MaternParams(1.0, 1.0, 0.3), 64, rng)
            zb = z(cent)
            eta = gamma * zb
            eta += np.log(60 / side**2) - np.log(np.mean(np.exp(eta)))
            sel = rng.random(zb.size) < 1 / (1 + np.exp(-eta))
            pop = ArealPopulation(None, cent, np.full(zb.size, 1 / zb.size), sel, np.where(sel, zb, np.nan))
            cfg = TestConfig(k_values=(3,), m=99, seed=r, alternative="positive-ps")
            rep_a = run_discrete_test(pop, zb, fit_selection(pop), cfg)
            pat = pop.selected_pattern()
            rep_p = run_nn_test(pat, z, IntensityModel.constant(pat.n), cfg)
            p_areal.append(rep_a.p_values[0, 0])
            p_point.append(rep_p.p_values[0, 0])
        assert np.corrcoef(p_areal, p_point)[0, 1] > 0.7


class TestArealCsv:
    def test_round_trip(self, tmp_path, rng):
        sel = rng.random(100) < 0.3
        pop = population(sel, marks=rng.standard_normal(100), w=rng.standard_normal((100, 2)),
                         x=rng.standard_normal((100, 1)))
        other = ArealPopulation(pop.ids, pop.centroids, pop.areas, ~sel, np.ones(100), pop.w, pop.x, time_index=3)
        path = tmp_path / "areal.csv"
        write_areal_csv([pop, other], path)
        back = read_areal_csv(path)
        assert [b.time_index for b in back] == [0, 3]
        for a, b in zip([pop, other], back):
            np.testing.assert_array_equal(a.centroids, b.centroids)
            np.testing.assert_array_equal(a.selected, b.selected)
            np.testing.assert_array_equal(a.marks, b.marks)
            np.testing.assert_array_equal(a.w, b.w)
            np.testing.assert_array_equal(a.x, b.x)
            assert b.ids == tuple(str(i) for i in a.ids)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(ArealParseError, match="empty"):
            read_areal_csv(path)

    @pytest.mark.parametrize(
        "row, message",
        [
            ("a,0.5,0.5,0.01,0,1,", "without a mark"),
            ("a,0.5,0.5,0.01,0,0,1.0", "unselected"),
            ("a,0.5,0.5,0.01,0,2,1.0", "0 or 1"),
            ("a,1.5,0.5,0.01,0,0,", "unit square"),
            ("a,0.5,0.5,0,0,0,", "positive"),
            ("a,0.5,0.5", "expected 7 fields"),
            ("a,zero,0.5,0.01,0,0,", "could not convert"),
        ],
    )
    def test_malformed_rows_report_line(self, tmp_path, row, message):
        path = tmp_path / "bad.csv"
        path.write_text("id,cx,cy,area,t,selected,mark\nok,0.1,0.1,0.01,0,1,2.0\n" + row + "\n")
        with pytest.raises(ArealParseError, match=f":3: .*{message}"):
            read_areal_csv(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,x,y\n1,2,3\n")
        with pytest.raises(ArealParseError, match=":1:"):
            read_areal_csv(path)

    def test_duplicate_centroids_accepted(self):
        cent = np.array([[0.5, 0.5], [0.5, 0.5], [0.2, 0.2], [0.8, 0.8], [0.1, 0.9]])
        pop = ArealPopulation(None, cent, np.ones(5) / 5, np.ones(5, bool), np.arange(5.0))
        rep = run_discrete_test(pop, np.arange(5.0), SelectionModel(0.0), TestConfig(k_values=(1,), fix_n=True))
        assert np.isfinite(rep.rho_obs).all()
