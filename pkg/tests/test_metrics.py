import numpy as np
import pytest

from glmar import DataError
from glmar import lattice, metrics
from glmar.simulate import GroundTruth
from glmar.summary import PosteriorSummary


def make_summary(w_mean, a_mean=None, w_var=None, a_var=None, method="hmc",
                 w_draws=None, w_cov=None):
    k, n = w_mean.shape
    if a_mean is None:
        a_mean = np.zeros((1, n))
    p = a_mean.shape[0]
    return PosteriorSummary(
        method=method,
        w_mean=np.asarray(w_mean, float),
        a_mean=np.asarray(a_mean, float),
        alpha_mean=np.ones(k),
        beta_mean=np.ones(p),
        lambda_mean=np.ones(n),
        w_var=w_var,
        a_var=a_var,
        w_draws=w_draws,
        w_cov=w_cov,
    )


def make_set(estimates, truth_w, method="hmc", w_var=None, a_estimates=None):
    """estimates: list over replicates of (K, N) arrays."""
    k, n = truth_w.shape
    if a_estimates is None:
        seeded = np.random.default_rng(abs(hash(method)) % 2**32)
        a_estimates = [0.1 * seeded.standard_normal((1, n)) for _ in estimates]
    summaries = [
        make_summary(e, a_mean=a, w_var=(None if w_var is None else w_var),
                     method=method)
        for e, a in zip(estimates, a_estimates)
    ]
    truth = GroundTruth(W=truth_w, A=np.zeros((1, n)), lam=np.ones(n), seed=0)
    return metrics.ReplicateSet(method=method, summaries=summaries, truth=truth)


class TestSummaryStats:
    def test_perfect_estimator(self, rng):
        truth = rng.standard_normal((2, 6))
        rep = make_set([truth.copy() for _ in range(4)], truth)
        s = metrics.summary_stats(rep, ("w", 0))
        assert s.asbias == 0.0 and s.amse == 0.0
        assert s.correlation == pytest.approx(1.0)

    def test_two_replicates_hand_values(self):
        truth = np.zeros((1, 1))
        rep = make_set([np.array([[1.0]]), np.array([[-1.0]])], truth)
        s = metrics.summary_stats(rep, ("w", 0))
        assert s.asbias == pytest.approx(0.0)
        assert s.amse == pytest.approx(1.0)

    def test_avar_absent_without_variances(self, rng):
        truth = rng.standard_normal((1, 4))
        rep = make_set([truth + rng.standard_normal((1, 4)) for _ in range(3)], truth)
        s = metrics.summary_stats(rep, ("w", 0))
        assert s.avar is None

    def test_avar_averages_posterior_variances(self, rng):
        truth = rng.standard_normal((1, 4))
        var = np.full((1, 4), 0.7)
        rep = make_set([truth.copy() for _ in range(3)], truth, w_var=var)
        s = metrics.summary_stats(rep, ("w", 0))
        assert s.avar == pytest.approx(0.7)

    def test_amse_at_least_asbias(self, rng):
        truth = rng.standard_normal((2, 10))
        ests = [truth + 0.5 * rng.standard_normal((2, 10)) for _ in range(6)]
        rep = make_set(ests, truth)
        for block in rep.blocks():
            if block[0] != "w":
                continue
            s = metrics.summary_stats(rep, block)
            assert s.amse >= s.asbias - 1e-12

    def test_mismatched_truth_rejected(self, rng):
        truth = GroundTruth(W=np.zeros((3, 4)), A=np.zeros((1, 4)),
                            lam=np.ones(4), seed=0)
        with pytest.raises(DataError):
            metrics.ReplicateSet(
                method="x", summaries=[make_summary(np.zeros((2, 4)))], truth=truth
            )


class TestMoransI:
    def test_two_point_antithetic(self):
        mask = lattice.Mask.full(1, 2)
        weights = metrics.MoranWeights.from_mask(mask)
        assert metrics.morans_i(np.array([1.0, -1.0]), weights) == pytest.approx(-1.0)

    def test_checkerboard_negative(self):
        mask = lattice.Mask.full(4, 4)
        weights = metrics.MoranWeights.from_mask(mask)
        img = np.array([(-1.0) ** (i + j) for i, j in mask.coords])
        assert metrics.morans_i(img, weights) < 0

    def test_permutation_shrinks_autocorrelation(self, rng):
        mask = lattice.Mask.full(8, 8)
        weights = metrics.MoranWeights.from_mask(mask)
        # smooth image: distance from center
        img = -np.linalg.norm(mask.centroids - [3.5, 3.5], axis=1)
        smooth = metrics.morans_i(img, weights)
        shuffled = [
            abs(metrics.morans_i(rng.permutation(img), weights)) for _ in range(10)
        ]
        assert smooth > 0
        assert np.mean(shuffled) < abs(smooth) / 2

    def test_matches_brute_force(self, rng):
        for dims in ((3, 5), (6, 6), (2, 2, 3)):
            mask = lattice.Mask.full(*dims)
            weights = metrics.MoranWeights.from_mask(mask)
            x = rng.standard_normal(mask.n_voxels)
            z = x - x.mean()
            n = mask.n_voxels
            num = sum(
                weights.phi[i, j] * z[i] * z[j]
                for i in range(n)
                for j in range(n)
            )
            want = (n / weights.phi.sum()) * num / float(z @ z)
            assert abs(metrics.morans_i(x, weights) - want) < 1e-12

    def test_constant_image_rejected(self):
        mask = lattice.Mask.full(2, 2)
        weights = metrics.MoranWeights.from_mask(mask)
        with pytest.raises(DataError, match="zero variance"):
            metrics.morans_i(np.ones(4), weights)


class TestPpm:
    def test_vacuous_threshold_probability_one(self, rng):
        draws = rng.standard_normal((50, 2, 6))
        s = make_summary(draws.mean(axis=0), w_draws=draws)
        contrast = metrics.Contrast(
            c=np.array([1.0, 0.0]), gamma_e=-np.inf, gamma_p=0.9
        )
        out = metrics.ppm(s, contrast)
        np.testing.assert_array_equal(out.probabilities, 1.0)
        assert out.active.all()

    def test_gaussian_at_threshold_is_half(self):
        w_mean = np.array([[1.5]])
        w_cov = np.full((1, 1, 1), 0.04)
        s = make_summary(w_mean, w_cov=w_cov, method="vb")
        contrast = metrics.Contrast(c=np.array([1.0]), gamma_e=1.5, gamma_p=0.9)
        out = metrics.ppm(s, contrast)
        assert out.probabilities[0] == pytest.approx(0.5)

    def test_monotone_in_effect_threshold(self, rng):
        draws = rng.standard_normal((200, 2, 10))
        s = make_summary(draws.mean(axis=0), w_draws=draws)
        c = np.array([0.5, -0.5])
        prev = None
        for ge in np.linspace(-2, 2, 9):
            out = metrics.ppm(s, metrics.Contrast(c=c, gamma_e=float(ge), gamma_p=0.9))
            if prev is not None:
                assert np.all(out.probabilities <= prev + 1e-12)
            prev = out.probabilities

    def test_probabilities_in_unit_interval(self, rng):
        draws = rng.standard_normal((100, 3, 8))
        s = make_summary(draws.mean(axis=0), w_draws=draws)
        contrast = metrics.Contrast(
            c=np.array([1.0, -1.0, 0.0]), gamma_e=("top_quantile", 0.1), gamma_p=0.9
        )
        out = metrics.ppm(s, contrast)
        assert np.all(out.probabilities >= 0) and np.all(out.probabilities <= 1)

    def test_contrast_length_mismatch(self, rng):
        s = make_summary(rng.standard_normal((2, 4)))
        with pytest.raises(DataError):
            metrics.ppm(s, metrics.Contrast(c=np.ones(3), gamma_e=0.0, gamma_p=0.9))

    def test_point_summary_cannot_map(self, rng):
        s = make_summary(rng.standard_normal((2, 4)), method="ols")
        with pytest.raises(DataError, match="neither draws nor"):
            metrics.ppm(s, metrics.Contrast(c=np.ones(2), gamma_e=0.0, gamma_p=0.9))

    def test_top_quantile_rule(self, rng):
        vals = np.arange(10.0)
        contrast = metrics.Contrast(
            c=np.array([1.0]), gamma_e=("top_quantile", 0.2), gamma_p=0.9
        )
        ge = metrics.resolve_gamma_e(contrast, vals)
        assert np.sum(vals > ge) == 2

    def test_above_global_mean_rule(self):
        contrast = metrics.Contrast(
            c=np.array([1.0]), gamma_e=("above_global_mean", 1.0), gamma_p=0.9
        )
        ge = metrics.resolve_gamma_e(contrast, np.full(5, 2.0))
        assert ge == pytest.approx(2.02)

    def test_study3_fame_contrast_form(self):
        c = np.array([-1.0, -1.0, 1.0, 1.0, 0.0]) / 2.0
        contrast = metrics.Contrast(c=c, gamma_e=("top_quantile", 0.1), gamma_p=0.9)
        assert contrast.gamma_p == 0.9
        assert contrast.c @ np.array([0, 0, 1, 1, 5.0]) == pytest.approx(1.0)


class TestSensitivity:
    def test_perfect_detector(self):
        probs = np.array([1.0, 1.0, 0.0, 0.0])
        truth = np.array([True, True, False, False])
        curve = metrics.sensitivity_curve(probs, truth)
        assert np.all(curve[:, 1] == 1.0)

    def test_blind_detector(self):
        probs = np.zeros(4)
        truth = np.array([True, False, True, False])
        curve = metrics.sensitivity_curve(probs, truth)
        assert np.all(curve[:, 1] == 0.0)

    def test_empty_truth_rejected(self):
        with pytest.raises(DataError):
            metrics.sensitivity_curve(np.ones(3), np.zeros(3, dtype=bool))

    def test_threshold_grid_default(self):
        curve = metrics.sensitivity_curve(np.ones(2), np.array([True, False]))
        assert curve[0, 0] == pytest.approx(0.9)
        assert curve[-1, 0] == pytest.approx(1.0)


class TestCompare:
    def test_self_comparison_is_unity(self, rng):
        truth = rng.standard_normal((2, 8))
        ests = [truth + 0.3 * rng.standard_normal((2, 8)) for _ in range(4)]
        a_ests = [0.1 * rng.standard_normal((1, 8)) for _ in range(4)]
        rep_a = make_set(ests, truth, method="a", a_estimates=a_ests)
        rep_b = make_set(
            [e.copy() for e in ests], truth, method="b",
            a_estimates=[a.copy() for a in a_ests],
        )
        rep = metrics.compare_report(rep_a, rep_b)
        for v in rep.amse_ratio.values():
            assert v == pytest.approx(1.0)
        for v in rep.estimate_correlation.values():
            assert v == pytest.approx(1.0)
        assert rep.mean_amse_ratio == pytest.approx(1.0)

    def test_ratios_reciprocal(self, rng):
        truth = rng.standard_normal((2, 8))
        ea = [truth + 0.3 * rng.standard_normal((2, 8)) for _ in range(4)]
        eb = [truth + 0.6 * rng.standard_normal((2, 8)) for _ in range(4)]
        rep_ab = metrics.compare_report(make_set(ea, truth), make_set(eb, truth))
        rep_ba = metrics.compare_report(make_set(eb, truth), make_set(ea, truth))
        for name in rep_ab.amse_ratio:
            prod = rep_ab.amse_ratio[name] * rep_ba.amse_ratio[name]
            assert prod == pytest.approx(1.0, rel=1e-12)

    def test_mismatched_sets_rejected(self, rng):
        truth = rng.standard_normal((2, 8))
        rep_a = make_set([truth.copy() for _ in range(3)], truth)
        rep_b = make_set([truth.copy() for _ in range(2)], truth)
        with pytest.raises(DataError):
            metrics.compare_report(rep_a, rep_b)


class TestWriters:
    def test_stats_table_layout(self, rng, tmp_path):
        truth = rng.standard_normal((3, 9))
        mask = lattice.Mask.full(3, 3)
        ests = [truth + 0.2 * rng.standard_normal((3, 9)) for _ in range(2)]
        rep = make_set(ests, truth)
        weights = metrics.MoranWeights.from_mask(mask)
        path = tmp_path / "stats.csv"
        doc = metrics.write_stats_table(rep, path, weights=weights)
        lines = path.read_text().splitlines()
        assert lines[0].split(",") == ["method", "measure", "w1", "w2", "w3", "a1"]
        measures = {ln.split(",")[1] for ln in lines[1:]}
        assert {"asbias", "amse", "avar", "correlation", "moran_i"} <= measures
        assert doc["columns"] == ["w1", "w2", "w3", "a1"]

    def test_grid_and_pgm_round_trip(self, tmp_path, rng):
        mask = lattice.Mask((2, 3), np.array([[1, 0, 1], [1, 1, 1]], dtype=bool))
        img = rng.standard_normal(mask.n_voxels)
        grid = metrics.image_to_grid(img, mask)
        assert np.isnan(grid[0, 1])
        assert grid[0, 0] == img[0]
        metrics.write_grid_csv(grid, tmp_path / "g.csv")
        lines = (tmp_path / "g.csv").read_text().splitlines()
        assert len(lines) == 2
        assert lines[0].split(",")[1] == ""
        metrics.write_pgm(grid, tmp_path / "g.pgm")
        content = (tmp_path / "g.pgm").read_text().splitlines()
        assert content[0] == "P2" and content[1] == "3 2"
        vals = [int(v) for row in content[3:] for v in row.split()]
        assert min(vals) == 0  # masked-out cell
        assert max(vals) <= 255
