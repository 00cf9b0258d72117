import numpy as np
import pytest

from glmar import DataError
from glmar import lattice, model, simulate as sim


def tiny_scenario(rng, alpha=None, beta=None, lambda_spec=("fixed", 4.0),
                  mask=None, t=60, k=2, p=1, seed=5, n_reps=3):
    mask = mask or lattice.Mask.full(5, 5)
    design = np.column_stack(
        [np.ones(t)] + [rng.standard_normal(t) for _ in range(k - 1)]
    )
    return sim.SimScenario(
        name="tiny",
        alpha=np.ones(k) if alpha is None else alpha,
        beta=np.full(p, 100.0) if beta is None else beta,
        lambda_spec=lambda_spec,
        design=design,
        mask=mask,
        n_reps=n_reps,
        seed=seed,
    )


class TestDrawTruth:
    def test_huge_precision_vanishing_coefficients(self, rng):
        scen = tiny_scenario(rng, alpha=np.full(2, 1e12))
        kern = sim.scenario_kernel(scen)
        truth = sim.draw_truth(scen, kern)
        assert np.max(np.abs(truth.W)) < 1e-4

    def test_sample_covariance_matches_inverse_precision(self, rng):
        scen = tiny_scenario(rng)
        kern = sim.scenario_kernel(scen)
        n = kern.n_voxels
        want = np.linalg.inv(kern.StS.toarray())
        draws = np.empty((500, n))
        for j in range(500):
            s = sim.with_overrides(scen, seed=1000 + j)
            draws[j] = sim.draw_truth(s, kern).W[0]
        got = np.cov(draws.T, bias=True)
        # Relative Frobenius error plus per-diagonal agreement.
        assert np.linalg.norm(got - want) / np.linalg.norm(want) < 0.15
        np.testing.assert_allclose(np.diag(got), np.diag(want), rtol=0.15)

    def test_deterministic(self, rng):
        scen = tiny_scenario(rng)
        kern = sim.scenario_kernel(scen)
        t1 = sim.draw_truth(scen, kern)
        t2 = sim.draw_truth(scen, kern)
        assert np.array_equal(t1.W, t2.W)
        assert np.array_equal(t1.A, t2.A)
        assert np.array_equal(t1.lam, t2.lam)

    def test_prior_quadratic_chi_square_mean(self, rng):
        scen = tiny_scenario(rng, alpha=np.array([2.0, 0.5]))
        kern = sim.scenario_kernel(scen)
        n = kern.n_voxels
        vals = []
        for j in range(500):
            s = sim.with_overrides(scen, seed=2000 + j)
            truth = sim.draw_truth(s, kern)
            for k in range(2):
                q = truth.W[k] @ (kern.StS @ truth.W[k])
                vals.append(scen.alpha[k] * q)
        assert abs(np.mean(vals) - n) <= 0.1 * n

    def test_gamma_lambda_spec(self, rng):
        scen = tiny_scenario(rng, lambda_spec=("gamma", 10.0, 10.0), seed=3)
        kern = sim.scenario_kernel(scen)
        truth = sim.draw_truth(scen, kern)
        assert np.all(truth.lam > 0)
        assert 50 < truth.lam.mean() < 200  # mean 100

    def test_kernel_mask_mismatch(self, rng):
        scen = tiny_scenario(rng)
        other = lattice.build_kernel(lattice.Mask.full(2, 2))
        with pytest.raises(DataError):
            sim.draw_truth(scen, other)


class TestGenerateReplicate:
    def test_noiseless_series_equals_signal(self, rng):
        scen = tiny_scenario(rng, lambda_spec=("fixed", np.inf))
        kern = sim.scenario_kernel(scen)
        truth = sim.draw_truth(scen, kern)
        truth = sim.GroundTruth(W=truth.W, A=np.zeros_like(truth.A),
                                lam=truth.lam, seed=truth.seed)
        data = sim.generate_replicate(truth, scen, 0)
        want = scen.design @ truth.W
        np.testing.assert_array_equal(data.Y[scen.P:], want[scen.P:])

    def test_white_noise_variance(self, rng):
        mask = lattice.Mask.full(1, 2)
        scen = tiny_scenario(rng, mask=mask, t=2000, lambda_spec=("fixed", 4.0))
        kern = sim.scenario_kernel(scen)
        truth = sim.GroundTruth(
            W=np.zeros((2, 2)), A=np.zeros((1, 2)), lam=np.full(2, 4.0), seed=0
        )
        data = sim.generate_replicate(truth, scen, 0)
        got = data.Y.var(axis=0)
        np.testing.assert_allclose(got, 0.25, rtol=0.10)

    def test_ar1_autocorrelation(self, rng):
        mask = lattice.Mask.full(1, 2)
        scen = tiny_scenario(rng, mask=mask, t=6000, lambda_spec=("fixed", 1.0))
        truth = sim.GroundTruth(
            W=np.zeros((2, 2)), A=np.full((1, 2), 0.5), lam=np.ones(2), seed=0
        )
        data = sim.generate_replicate(truth, scen, 0)
        e = data.Y[:, 0]
        rho = np.corrcoef(e[1:], e[:-1])[0, 1]
        assert abs(rho - 0.5) < 0.05

    def test_unstable_ar_warns_not_errors(self, rng):
        mask = lattice.Mask.full(1, 2)
        scen = tiny_scenario(rng, mask=mask, t=40)
        truth = sim.GroundTruth(
            W=np.zeros((2, 2)), A=np.full((1, 2), 1.2), lam=np.full(2, 1e6), seed=0
        )
        with pytest.warns(UserWarning, match="non-stationary"):
            data = sim.generate_replicate(truth, scen, 0)
        assert np.all(np.isfinite(data.Y))

    def test_replicates_distinct_but_reproducible(self, rng):
        scen = tiny_scenario(rng)
        kern = sim.scenario_kernel(scen)
        truth = sim.draw_truth(scen, kern)
        d0a = sim.generate_replicate(truth, scen, 0)
        d0b = sim.generate_replicate(truth, scen, 0)
        d1 = sim.generate_replicate(truth, scen, 1)
        assert np.array_equal(d0a.Y, d0b.Y)
        assert not np.array_equal(d0a.Y, d1.Y)

    def test_stationary_start_distribution(self):
        # AR(1) stationary variance is noise_var / (1 - a^2).
        rng = np.random.default_rng(0)
        draws = np.array(
            [sim._stationary_start(np.array([0.6]), 2.0, rng)[0] for _ in range(4000)]
        )
        want = 4.0 / (1 - 0.36)
        assert abs(draws.var() - want) / want < 0.1

    def test_unstable_start_is_none(self):
        rng = np.random.default_rng(0)
        assert sim._stationary_start(np.array([1.01]), 1.0, rng) is None


class TestPresets:
    def test_study1_values(self):
        s = sim.preset_scenarios("desk")["study1"]
        np.testing.assert_array_equal(s.alpha, np.ones(5))
        assert s.beta.tolist() == [1000.0]
        assert s.lambda_spec == ("gamma", 10.0, 10.0)
        assert s.P == 1 and s.K == 5
        assert s.mask.n_voxels == 400 and s.n_reps == 20

    def test_study2_values(self):
        s = sim.preset_scenarios("desk")["study2"]
        assert s.K == 13 and s.P == 3
        assert s.alpha[0] == 0.1 and s.alpha[3] == 0.5 and s.alpha[6] == 1.0
        assert s.alpha[9] == 2.0 and s.alpha[12] == 1.0
        assert s.beta.tolist() == [1000.0, 2000.0, 5000.0]

    def test_study3_values(self):
        s = sim.preset_scenarios("desk")["study3"]
        np.testing.assert_array_equal(s.alpha, [100.0, 100.0, 100.0, 100.0, 0.01])
        assert s.beta.tolist() == [400.0]
        assert s.lambda_spec == ("fixed", 0.1)

    def test_full_scale_mask(self):
        s = sim.preset_scenarios("full")["study3"]
        assert s.mask.dims == (53, 63)
        assert s.mask.n_voxels == 2087
        assert s.n_reps == 100

    def test_designs_full_rank_and_shaped(self):
        d5 = sim.design_k5()
        d13 = sim.design_k13()
        assert d5.shape == (351, 5) and d13.shape == (351, 13)
        assert np.linalg.matrix_rank(d5.T @ d5) == 5
        assert np.linalg.matrix_rank(d13.T @ d13) == 13
        # constant column last
        np.testing.assert_array_equal(d5[:, -1], 1.0)
        np.testing.assert_array_equal(d13[:, -1], 1.0)

    def test_brain_mask_connected(self):
        mask = sim.brain_mask()
        # flood fill from the first voxel must reach every voxel
        from collections import deque
        idx = mask.index_of
        start = tuple(mask.coords[0])
        seen = {start}
        queue = deque([start])
        while queue:
            i, j = queue.popleft()
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if (
                    0 <= ni < mask.dims[0] and 0 <= nj < mask.dims[1]
                    and mask.inside[ni, nj] and (ni, nj) not in seen
                ):
                    seen.add((ni, nj))
                    queue.append((ni, nj))
        assert len(seen) == mask.n_voxels


class TestScenarioValidation:
    def test_bad_precisions(self, rng):
        with pytest.raises(DataError):
            tiny_scenario(rng, alpha=np.array([1.0, -1.0]))

    def test_bad_lambda_spec(self, rng):
        with pytest.raises(DataError):
            tiny_scenario(rng, lambda_spec=("weird", 1.0))

    def test_round_trip_fit_recovers_truth(self, rng):
        # Small end-to-end calibration: fit the variational backend on one
        # clean replicate and expect a high-correlation recovery.
        scen = tiny_scenario(rng, alpha=np.ones(2), lambda_spec=("fixed", 25.0),
                             t=120, seed=12)
        kern = sim.scenario_kernel(scen)
        truth = sim.draw_truth(scen, kern)
        data = sim.generate_replicate(truth, scen, 0)
        from glmar import vb
        q, summary = vb.run_vb(data, kern, model.HyperPriors(), vb.VBConfig())
        for k in range(2):
            corr = np.corrcoef(summary.w_mean[k], truth.W[k])[0, 1]
            assert corr > 0.95
