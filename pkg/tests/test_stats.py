import numpy as np
import pytest

from semcorr.errors import NoValidQuadruples, TooFewSamples
from semcorr.stats import (
    SIGMA_FLOOR,
    beta_log_pdf,
    beta_log_pdf_grad,
    certainty,
    feature_variance_objective,
    fit_beta,
    gauss_kernel,
)


class TestFitBeta:
    def test_uniform_moments(self):
        # mean 0.5, variance 1/12 -> nu = 0.25*12 - 1 = 2 -> Beta(1, 1)
        x = np.array([0.5 - np.sqrt(1 / 6.0), 0.5 + np.sqrt(1 / 6.0), 0.5, 0.5])
        assert abs(x.var() - 1 / 12.0) < 1e-12
        p = fit_beta(x)
        assert abs(p.alpha - 1.0) < 1e-6 and abs(p.beta - 1.0) < 1e-6

    def test_hand_moments(self):
        # mean 0.5, variance 1/20 -> nu = 0.25*20 - 1 = 4 -> Beta(2, 2)
        x = np.array([0.5 - np.sqrt(1 / 10.0), 0.5 + np.sqrt(1 / 10.0), 0.5, 0.5])
        assert abs(x.var() - 1 / 20.0) < 1e-12
        p = fit_beta(x)
        assert abs(p.alpha - 2.0) < 1e-9 and abs(p.beta - 2.0) < 1e-9

    def test_recovers_sampling_distribution(self):
        rng = np.random.default_rng(0)
        x = rng.beta(3.0, 5.0, size=100_000)
        p = fit_beta(x)
        assert abs(p.alpha - 3.0) / 3.0 < 0.05
        assert abs(p.beta - 5.0) / 5.0 < 0.05

    def test_fitted_mean_equals_sample_mean(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.uniform(0.1, 0.9, size=50)
            p = fit_beta(x)
            assert abs(p.mean - x.mean()) < 1e-9

    def test_near_zero_variance_high_concentration(self):
        p = fit_beta(np.full(10, 0.3))
        assert p.alpha + p.beta >= 1e4 * 0.999
        assert abs(p.mean - 0.3) < 1e-3

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            fit_beta([0.5, 0.6])


class TestBetaLogPdf:
    def test_uniform_density(self):
        p = fit_beta(np.array([0.5 - np.sqrt(1 / 6.0), 0.5 + np.sqrt(1 / 6.0), 0.5, 0.5]))
        for x in (0.1, 0.5, 0.9):
            assert abs(beta_log_pdf(p, x)) < 1e-6

    def test_beta22_closed_form(self):
        from semcorr.stats import BetaParams

        assert abs(beta_log_pdf(BetaParams(2.0, 2.0), 0.5) - np.log(1.5)) < 1e-12

    def test_gradient_matches_fd(self):
        from semcorr.stats import BetaParams

        p = BetaParams(3.0, 5.0)
        h = 1e-6
        for x in (0.1, 0.3, 0.7):
            fd = (beta_log_pdf(p, x + h) - beta_log_pdf(p, x - h)) / (2 * h)
            g = beta_log_pdf_grad(p.alpha, p.beta, x)
            assert abs(g - fd) / abs(fd) < 1e-5


class TestGaussKernel:
    def test_peak(self):
        assert gauss_kernel(2.0, 2.0, 0.5) == 1.0

    def test_one_sigma(self):
        assert abs(gauss_kernel(2.5, 2.0, 0.5) - np.exp(-0.5)) < 1e-12

    def test_monotone_in_distance(self):
        x = np.linspace(0, 5, 100)
        v = gauss_kernel(x, 0.0, 1.0)
        assert np.all(np.diff(v) < 0)

    def test_symmetric_and_bounded(self):
        x = np.linspace(-4, 4, 81)
        v = gauss_kernel(x, 0.0, 0.7)
        assert np.allclose(v, v[::-1])
        assert np.all(v > 0) and np.all(v <= 1)

    def test_sigma_floor(self):
        assert gauss_kernel(0.001, 0.0, 0.0) == gauss_kernel(0.001, 0.0, SIGMA_FLOOR)


class TestCertainty:
    def test_identical_members(self):
        f = np.tile(np.eye(4)[0], (5, 1))
        c = certainty(f[0], f)
        assert c.a_mu == 1.0 and c.a_sigma == SIGMA_FLOOR

    def test_two_member_mean(self):
        mean = np.array([1.0, 0.0, 0.0])
        m1 = np.array([0.8, 0.6, 0.0])  # cos = 0.8
        m2 = np.array([1.0, 0.0, 0.0])  # cos = 1.0
        c = certainty(mean, [m1, m2])
        assert abs(c.a_mu - 0.9) < 1e-12

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(2)
        members = rng.normal(size=(40, 8))
        members /= np.linalg.norm(members, axis=1, keepdims=True)
        mean = members.mean(axis=0)
        mean /= np.linalg.norm(mean)
        c = certainty(mean, members)
        sims = np.array([m @ mean for m in members])
        assert abs(c.a_mu - sims.mean()) < 1e-9
        assert abs(c.a_sigma - max(sims.std(), SIGMA_FLOOR)) < 1e-9

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            certainty(np.eye(3)[0], np.eye(3)[:1])


class TestVarianceObjective:
    def test_identical_features_zero(self):
        a = np.full((4, 7), 1.2)
        r = np.full((4, 7), 0.4)
        valid = np.ones((4, 7), dtype=bool)
        assert feature_variance_objective(a, r, valid) == 0.0

    def test_hand_variance(self):
        # one quadruple, A/pi in {0.2, 0.4} (population var 0.01), R constant
        a = np.array([[0.2 * np.pi], [0.4 * np.pi]])
        r = np.array([[0.5], [0.5]])
        valid = np.ones((2, 1), dtype=bool)
        assert abs(feature_variance_objective(a, r, valid) - 0.01) < 1e-12

    def test_constant_quadruple_adds_nothing(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, np.pi, size=(5, 3))
        r = rng.uniform(0.2, 0.8, size=(5, 3))
        valid = np.ones((5, 3), dtype=bool)
        base = feature_variance_objective(a, r, valid)
        a2 = np.concatenate([a, np.full((5, 1), 0.7)], axis=1)
        r2 = np.concatenate([r, np.full((5, 1), 0.3)], axis=1)
        v2 = np.ones((5, 4), dtype=bool)
        assert abs(feature_variance_objective(a2, r2, v2) - base) < 1e-12

    def test_underpopulated_quadruples_skipped(self):
        a = np.array([[0.5, 1.0], [0.7, np.nan]])
        r = np.array([[0.5, 0.5], [0.6, np.nan]])
        valid = np.array([[True, True], [True, False]])
        # second quadruple valid in one image only -> skipped
        got = feature_variance_objective(a, r, valid)
        want = feature_variance_objective(a[:, :1], r[:, :1], valid[:, :1])
        assert abs(got - want) < 1e-12

    def test_no_valid_quadruples(self):
        with pytest.raises(NoValidQuadruples):
            feature_variance_objective(
                np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), dtype=bool)
            )
