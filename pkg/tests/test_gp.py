"""Tests for the latent Gaussian layer: density, simulation, kriging."""

import math

import numpy as np
import pytest

from gevfield.exceptions import InputError
from gevfield.gp import (
    KrigingResult,
    LatentFieldDraws,
    MeanStructure,
    gp_log_density,
    gp_simulate,
    krige,
    krige_draws,
    krige_factor,
    krige_many,
)
from gevfield.linalg import CholeskyFactor
from gevfield.spatial import CovarianceSpec, Location, SourceTag, covariance_matrix


def site(east, north):
    return Location(east, north, 0.0, 0.0, 0.0, SourceTag.FIELD)


def const_mean(c):
    return MeanStructure(np.array([c]), lambda s: np.array([1.0]))


class TestLogDensity:
    def test_univariate_at_mean(self):
        spec = CovarianceSpec(2.0, 0.5, 3.0, 1.0)
        got = gp_log_density(const_mean(7.0), spec, np.array([7.0]), [site(0, 0)])
        assert got == pytest.approx(-0.5 * math.log(2 * math.pi * 2.25), rel=1e-14)

    def test_matches_dense_inverse(self):
        rng = np.random.default_rng(5)
        spec = CovarianceSpec(1.3, 0.2, 8.0, 1.4)
        sites = [site(*xy) for xy in rng.uniform(0, 30, size=(3, 2))]
        fieldvec = rng.normal(5.0, 1.0, 3)
        got = gp_log_density(const_mean(5.0), spec, fieldvec, sites)

        cov = covariance_matrix(spec, sites)
        dev = fieldvec - 5.0
        sign, logdet = np.linalg.slogdet(cov)
        want = -0.5 * (3 * math.log(2 * math.pi) + logdet + dev @ np.linalg.inv(cov) @ dev)
        assert got == pytest.approx(want, abs=1e-10)

    def test_huge_nugget_factorizes(self):
        # dominant diagonal: density approaches product of univariate normals
        spec = CovarianceSpec(1.0, 200.0, 5.0, 1.0)
        sites = [site(0, 0), site(1, 0)]
        x = np.array([3.0, -2.0])
        got = gp_log_density(const_mean(0.0), spec, x, sites)
        v = 1.0 + 200.0**2
        want = sum(-0.5 * (math.log(2 * math.pi * v) + xi**2 / v) for xi in x)
        assert got == pytest.approx(want, rel=1e-6)

    def test_maximized_at_mean(self):
        rng = np.random.default_rng(6)
        spec = CovarianceSpec(0.9, 0.1, 6.0, 1.0)
        sites = [site(*xy) for xy in rng.uniform(0, 20, size=(4, 2))]
        m = np.full(4, 2.0)
        at_mean = gp_log_density(const_mean(2.0), spec, m, sites)
        for _ in range(20):
            bump = rng.normal(0, 0.5, 4)
            assert gp_log_density(const_mean(2.0), spec, m + bump, sites) < at_mean

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            gp_log_density(
                const_mean(0.0), CovarianceSpec(1, 0, 1, 1), np.zeros(3), [site(0, 0)]
            )


class TestSimulate:
    def test_degenerate_returns_mean(self):
        spec = CovarianceSpec(0.0, 0.0, 3.0, 1.0)
        sites = [site(0, 0), site(5, 5)]
        out = gp_simulate(const_mean(4.0), spec, sites, np.random.default_rng(0))
        np.testing.assert_array_equal(out, [4.0, 4.0])

    def test_seed_reproducible(self):
        spec = CovarianceSpec(1.0, 0.1, 3.0, 1.0)
        sites = [site(0, 0), site(2, 1)]
        a = gp_simulate(const_mean(0.0), spec, sites, np.random.default_rng(9))
        b = gp_simulate(const_mean(0.0), spec, sites, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_moments_match(self):
        # empirical covariance over replicates within 3 MC standard errors
        rng = np.random.default_rng(10)
        spec = CovarianceSpec(1.5, 0.3, 10.0, 1.2)
        sites = [site(0, 0), site(4, 0), site(0, 7), site(12, 5)]
        cov = covariance_matrix(spec, sites)
        factor = CholeskyFactor(cov)
        n = 40_000
        z = rng.standard_normal((n, 4))
        draws = 3.0 + z @ factor.lower.T  # same construction gp_simulate uses
        emp = np.cov(draws.T, ddof=1)
        for i in range(4):
            for j in range(4):
                se = math.sqrt((cov[i, i] * cov[j, j] + cov[i, j] ** 2) / n)
                assert abs(emp[i, j] - cov[i, j]) < 3 * se, (i, j)
        se_mean = np.sqrt(np.diag(cov) / n)
        assert np.all(np.abs(draws.mean(axis=0) - 3.0) < 3 * se_mean)


class TestKrige:
    def test_uncorrelated_target_returns_prior(self):
        spec = CovarianceSpec(2.0, 0.0, 0.5, 2.0)  # tiny range: far target decorrelates
        sites = [site(0, 0)]
        res = krige(const_mean(1.0), spec, np.array([5.0]), sites, site(1000, 1000))
        assert res.cond_mean == pytest.approx(1.0, abs=1e-12)
        assert res.cond_var == pytest.approx(2.0, rel=1e-12)

    def test_bivariate_closed_form(self):
        # one observed site, zero mean, unit variance, no nugget:
        # conditional is (r v, 1 - r^2)
        spec = CovarianceSpec(1.0, 0.0, 4.0, 1.0)
        d = 3.0
        r = math.exp(-((d / 4.0) ** 1.0))
        v = 2.2
        res = krige(const_mean(0.0), spec, np.array([v]), [site(0, 0)], site(d, 0))
        assert res.cond_mean == pytest.approx(r * v, rel=1e-12)
        assert res.cond_var == pytest.approx(1 - r**2, rel=1e-12)

    def test_positively_correlated_predictor(self):
        # mean update must move toward the observed anomaly, not away
        spec = CovarianceSpec(1.0, 0.0, 5.0, 1.0)
        res = krige(const_mean(0.0), spec, np.array([3.0]), [site(0, 0)], site(1, 0))
        assert res.cond_mean > 0.0

    def test_exact_interpolation_without_nugget(self):
        rng = np.random.default_rng(12)
        spec = CovarianceSpec(1.8, 0.0, 7.0, 1.3)
        sites = [site(*xy) for xy in rng.uniform(0, 25, size=(3, 2))]
        observed = rng.normal(0, 1, 3)
        res = krige(const_mean(0.0), spec, observed, sites, sites[1])
        assert res.cond_mean == pytest.approx(observed[1], abs=1e-10)
        assert res.cond_var <= 1e-10

    def test_colocated_with_nugget_keeps_discrepancy(self):
        # conditional variance at an observed site reduces to the nugget share
        s2, tau = 1.2, 0.6
        spec = CovarianceSpec(s2, tau, 5.0, 1.0)
        res = krige(const_mean(0.0), spec, np.array([1.0]), [site(0, 0)], site(0, 0))
        assert res.cond_var == pytest.approx(s2 * tau**2 / (s2 + tau**2), rel=1e-12)

    def test_variance_decreases_with_more_sites(self):
        spec = CovarianceSpec(1.0, 0.1, 8.0, 1.0)
        target = site(3, 3)
        all_sites = [site(0, 0), site(6, 0), site(0, 6)]
        values = np.array([1.0, -0.5, 0.7])
        prev = np.inf
        for k in (1, 2, 3):
            res = krige(const_mean(0.0), spec, values[:k], all_sites[:k], target)
            assert res.cond_var <= prev + 1e-12
            prev = res.cond_var

    def test_monte_carlo_projection_oracle(self):
        # joint simulation of (field at sites, smooth field at target);
        # kriging residual must be centred, orthogonal to the data, with
        # variance equal to cond_var -- the defining properties of Gaussian
        # conditioning.
        rng = np.random.default_rng(77)
        spec = CovarianceSpec(1.4, 0.25, 6.0, 1.1)
        sites = [site(0, 0), site(4, 1), site(1, 5)]
        target = site(2, 2)
        mean = const_mean(0.5)

        from gevfield.spatial import cross_distances, smooth_correlation

        cov_ss = covariance_matrix(spec, sites)
        k_ts = spec.sigma2 * smooth_correlation(spec, cross_distances([target], sites))[0]
        joint = np.zeros((4, 4))
        joint[:3, :3] = cov_ss
        joint[3, :3] = k_ts
        joint[:3, 3] = k_ts
        joint[3, 3] = spec.sigma2

        n = 200_000
        z = rng.standard_normal((n, 4))
        draws = 0.5 + z @ np.linalg.cholesky(joint).T
        xs, t = draws[:, :3], draws[:, 3]

        factor = krige_factor(spec, sites)
        means, variances = krige_many(mean, spec, np.zeros(3), sites, [target], factor)
        # conditional mean as a function of x: m* + k' Sigma^{-1} (x - m)
        w = factor.solve(k_ts)
        pred = 0.5 + (xs - 0.5) @ w
        resid = t - pred

        assert abs(resid.mean()) < 3 * resid.std(ddof=1) / math.sqrt(n)
        # residual variance vs cond_var
        r2 = resid**2
        assert abs(r2.mean() - variances[0]) < 3 * r2.std(ddof=1) / math.sqrt(n)
        # orthogonality to each conditioning coordinate
        for j in range(3):
            prod = resid * (xs[:, j] - 0.5)
            assert abs(prod.mean()) < 3 * prod.std(ddof=1) / math.sqrt(n)
        # and the same weights come out of an empirical regression
        bhat, *_ = np.linalg.lstsq(
            np.column_stack([np.ones(n), xs - 0.5]), t, rcond=None
        )
        resid_ols = t - bhat[0] - (xs - 0.5) @ bhat[1:]
        s2_ols = resid_ols @ resid_ols / (n - 4)
        xtx_inv = np.linalg.inv(
            np.column_stack([np.ones(n), xs - 0.5]).T @ np.column_stack([np.ones(n), xs - 0.5])
        )
        for j in range(3):
            se = math.sqrt(s2_ols * xtx_inv[j + 1, j + 1])
            assert abs(bhat[j + 1] - w[j]) < 3 * se


class TestKrigeDraws:
    def test_matches_krige_many_row_by_row(self):
        rng = np.random.default_rng(31)
        spec = CovarianceSpec(2.3, 0.4, 9.0, 1.2)
        sites = [site(*xy) for xy in rng.uniform(0, 30, size=(5, 2))]
        targets = [site(*xy) for xy in rng.uniform(0, 30, size=(3, 2))]
        mean = const_mean(1.7)
        draws = rng.normal(0, 1, size=(8, 5))
        means, variances = krige_draws(mean, spec, draws, sites, targets)
        assert means.shape == (8, 3) and variances.shape == (3,)
        for i in range(8):
            m_i, v_i = krige_many(mean, spec, draws[i], sites, targets)
            np.testing.assert_allclose(means[i], m_i, rtol=1e-12)
            np.testing.assert_allclose(variances, v_i, rtol=1e-12)

    def test_width_mismatch_rejected(self):
        spec = CovarianceSpec(1.0, 0.0, 5.0, 1.0)
        sites = [site(0, 0), site(3, 0)]
        with pytest.raises(InputError):
            krige_draws(const_mean(0.0), spec, np.zeros((4, 3)), sites, [site(1, 1)])


class TestContainers:
    def test_draws_validation(self):
        sites = [site(0, 0), site(1, 1)]
        d = LatentFieldDraws(np.zeros((5, 2)), sites)
        assert d.n_draws == 5 and d.n_sites == 2
        one_row = LatentFieldDraws(np.zeros(2), sites)
        assert one_row.n_draws == 1
        with pytest.raises(InputError):
            LatentFieldDraws(np.zeros((5, 3)), sites)

    def test_kriging_result_variance_sign(self):
        with pytest.raises(InputError):
            KrigingResult(0.0, -0.5)
