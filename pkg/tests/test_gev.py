"""Tests for the GEV core against independently computed references.

Reference values were produced with a 50-digit mpmath implementation of the
textbook formulas (CDF, log-density, closed-form quantile, Gamma-function
variance) and are frozen here as literals.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gevfield.exceptions import InputError
from gevfield.gev import (
    GevParams,
    ReturnLevelSpec,
    gev_cdf,
    gev_log_density,
    gev_loglik_total,
    gev_quantile,
    gev_sample,
    gev_variance,
    return_level,
)

# (mu, psi, xi, z) -> CDF, 50-digit reference
CDF_CASES = [
    ((10.0, 2.0, 0.1), 20.0, 0.98280796898677666497),
    ((0.0, 1.0, -0.2), 2.0, 0.92518644464701645987),
    ((0.0, 1.0, 0.0), 1.5, 0.80001071300435359003),
    ((5.0, 3.0, 1e-4), 11.0, 0.87339937861075281554),
]

LOGPDF_CASES = [
    ((10.0, 2.0, 0.1), 20.0, -5.1706048996655861248),
    ((0.0, 1.0, -0.2), 2.0, -2.1210624950639627328),
    ((0.0, 1.0, 0.0), 1.5, -1.7231301601484298289),
    ((5.0, 3.0, 1e-4), 11.0, -3.2339746447244680642),
]

QUANTILE_CASES = [
    ((10.0, 2.0, 0.1), 0.99, 21.681952475926458841),
    ((0.0, 1.0, -0.3), 0.5, 0.34708181484407026465),
    ((5.0, 3.0, 1e-4), 0.9, 11.751861661887740485),
]

# (psi, xi) -> variance; includes values straddling the series band
VARIANCE_CASES = [
    (2.0, 0.1, 8.9049642928329579709),
    (1.0, -0.25, 1.0345836006472538055),
    (1.0, 5e-4, 1.6470885383673312431),
    (1.0, -7e-4, 1.6419276456879898844),
    (1.0, 0.999e-3, 1.6492445624232348),
    (1.0, 1.001e-3, 1.6492532156106998),
    (1.0, 0.49, 193.33662312758618257),
]


class TestParams:
    def test_scale_must_be_positive(self):
        with pytest.raises(InputError):
            GevParams(0.0, 0.0, 0.1)
        with pytest.raises(InputError):
            GevParams(0.0, -1.0, 0.1)

    def test_nonfinite_rejected(self):
        with pytest.raises(InputError):
            GevParams(np.nan, 1.0, 0.1)
        with pytest.raises(InputError):
            GevParams(0.0, 1.0, np.inf)

    def test_support_bounds(self):
        lo, hi = GevParams(0.0, 1.0, 0.5).support_bounds()
        assert lo == -2.0 and hi == np.inf
        lo, hi = GevParams(0.0, 1.0, -0.5).support_bounds()
        assert lo == -np.inf and hi == 2.0
        assert GevParams(0.0, 1.0, 0.0).support_bounds() == (-np.inf, np.inf)

    def test_support_predicate(self):
        pars = GevParams(0.0, 1.0, 0.5)
        assert not pars.support(-2.5)
        assert pars.support(0.0)
        np.testing.assert_array_equal(
            pars.support(np.array([-3.0, 0.0, 100.0])), [False, True, True]
        )


class TestPointwiseValues:
    @pytest.mark.parametrize("pars,z,want", CDF_CASES)
    def test_cdf(self, pars, z, want):
        assert gev_cdf(GevParams(*pars), z) == pytest.approx(want, rel=1e-13)

    @pytest.mark.parametrize("pars,z,want", LOGPDF_CASES)
    def test_log_density(self, pars, z, want):
        assert gev_log_density(GevParams(*pars), z) == pytest.approx(want, rel=1e-13)

    @pytest.mark.parametrize("pars,p,want", QUANTILE_CASES)
    def test_quantile(self, pars, p, want):
        assert gev_quantile(GevParams(*pars), p) == pytest.approx(want, rel=1e-13)

    def test_gumbel_unit_cdf_at_location(self):
        # exp(-exp(0)) = 1/e
        assert gev_cdf(GevParams(0.0, 1.0, 0.0), 0.0) == pytest.approx(math.exp(-1.0), abs=1e-15)

    def test_gumbel_quantile_inverse(self):
        assert gev_quantile(GevParams(0.0, 1.0, 0.0), math.exp(-1.0)) == pytest.approx(
            0.0, abs=1e-12
        )
        # -log(-log 0.99), bisection-inversion reference
        assert gev_quantile(GevParams(0.0, 1.0, 0.0), 0.99) == pytest.approx(
            4.600149226776579, rel=1e-12
        )


class TestTotality:
    """Density and CDF are total functions: finite answers off the support."""

    def test_below_lower_endpoint(self):
        pars = GevParams(0.0, 1.0, 0.5)  # support (-2, inf)
        assert gev_cdf(pars, -3.0) == 0.0
        assert gev_log_density(pars, -3.0) == -np.inf

    def test_above_upper_endpoint(self):
        pars = GevParams(0.0, 1.0, -0.5)  # support (-inf, 2)
        assert gev_cdf(pars, 3.0) == 1.0
        assert gev_log_density(pars, 3.0) == -np.inf

    def test_vectorized_mixed_support(self):
        pars = GevParams(0.0, 1.0, 0.5)
        z = np.array([-5.0, -1.0, 2.0])
        dens = gev_log_density(pars, z)
        assert dens[0] == -np.inf and np.all(np.isfinite(dens[1:]))
        cdf = gev_cdf(pars, z)
        assert cdf[0] == 0.0 and np.all((cdf > 0) & (cdf < 1) == [False, True, True])


class TestRoundTrip:
    def test_grid(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for xi in (-0.4, -0.2, -1e-4, 0.0, 1e-4, 0.2, 0.4):
            for psi in (0.5, 1.0, 5.0):
                pars = GevParams(3.0, psi, xi)
                p = rng.uniform(1e-6, 1.0 - 1e-6, 500)
                back = gev_cdf(pars, gev_quantile(pars, p))
                worst = max(worst, float(np.max(np.abs(back - p))))
        assert worst < 1e-12

    @given(
        xi=st.floats(-0.45, 0.45),
        psi=st.floats(0.1, 20.0),
        mu=st.floats(-50.0, 50.0),
        p=st.floats(0.001, 0.999),
    )
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, xi, psi, mu, p):
        pars = GevParams(mu, psi, xi)
        assert gev_cdf(pars, gev_quantile(pars, p)) == pytest.approx(p, abs=1e-11)

    def test_quantile_domain_errors(self):
        pars = GevParams(0.0, 1.0, 0.1)
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(InputError):
                gev_quantile(pars, bad)


class TestShapeContinuity:
    def test_cdf_continuity_at_zero_shape(self):
        z = np.linspace(-4.0, 14.0, 400)
        gumbel = gev_cdf(GevParams(1.0, 1.5, 0.0), z)
        for xi in (1e-8, -1e-8, 2e-6, -2e-6):
            near = gev_cdf(GevParams(1.0, 1.5, xi), z)
            assert np.max(np.abs(near - gumbel)) < 1e-6

    def test_quantile_continuity_at_zero_shape(self):
        # |q(xi) - q(0)| ~ |xi| * log(-log p)^2 / 2, at most ~10.6|xi| here
        p = np.linspace(0.01, 0.99, 99)
        gumbel = gev_quantile(GevParams(0.0, 1.0, 0.0), p)
        for xi in (1e-8, -1e-8, 2e-6):
            near = gev_quantile(GevParams(0.0, 1.0, xi), p)
            assert np.max(np.abs(near - gumbel)) < 20.0 * abs(xi) + 1e-12


class TestDensityNormalization:
    @pytest.mark.parametrize("xi", [-0.3, 0.0, 0.2])
    def test_integrates_to_one(self, xi):
        from scipy.integrate import quad

        pars = GevParams(2.0, 1.5, xi)
        lo, hi = pars.support_bounds()
        lo = max(lo, pars.mu - 40 * pars.psi)
        hi = min(hi, pars.mu + 400 * pars.psi)
        total, _ = quad(lambda z: math.exp(gev_log_density(pars, z)), lo, hi, limit=200)
        assert total == pytest.approx(1.0, abs=1e-6)


class TestVariance:
    @pytest.mark.parametrize("psi,xi,want", VARIANCE_CASES)
    def test_values(self, psi, xi, want):
        assert gev_variance(GevParams(0.0, psi, xi)) == pytest.approx(want, rel=1e-9)

    def test_gumbel_closed_form(self):
        assert gev_variance(GevParams(5.0, 2.0, 0.0)) == pytest.approx(
            4.0 * math.pi**2 / 6.0, rel=1e-14
        )

    def test_undefined_for_heavy_tails(self):
        assert gev_variance(GevParams(0.0, 1.0, 0.5)) is None
        assert gev_variance(GevParams(0.0, 1.0, 0.8)) is None

    def test_monte_carlo_agreement(self):
        # smaller-n version of the acceptance check, all four shapes
        rng = np.random.default_rng(7)
        for xi in (-0.2, 0.0, 0.1, 0.3):
            pars = GevParams(0.0, 1.0, xi)
            x = gev_sample(pars, 200_000, rng)
            want = gev_variance(pars)
            got = float(np.var(x, ddof=1))
            # SE of the sample variance via fourth central moment
            m4 = float(np.mean((x - x.mean()) ** 4))
            se = math.sqrt((m4 - got**2 * (len(x) - 3) / (len(x) - 1)) / len(x))
            assert abs(got - want) < 3.0 * se


class TestReturnLevel:
    def test_matches_quantile(self):
        pars = GevParams(41.8, math.exp(1.96), 0.101)
        assert return_level(pars, 100.0) == pytest.approx(83.369828175179610179, rel=1e-13)
        assert return_level(pars, 100.0) == gev_quantile(pars, 0.99)

    def test_period_validation(self):
        with pytest.raises(InputError):
            return_level(GevParams(0.0, 1.0, 0.0), 1.0)
        with pytest.raises(InputError):
            ReturnLevelSpec(0.5)

    def test_spec_transform(self):
        spec = ReturnLevelSpec(100.0)
        assert spec.prob == pytest.approx(0.99, abs=1e-15)
        assert spec.y_p == pytest.approx(-math.log(0.99), rel=1e-14)

    def test_monotone_in_period(self):
        pars = GevParams(10.0, 2.0, 0.1)
        levels = [return_level(pars, p) for p in (2, 10, 50, 100, 1000)]
        assert all(a < b for a, b in zip(levels, levels[1:]))


class TestSampling:
    def test_size_validation(self):
        with pytest.raises(InputError):
            gev_sample(GevParams(0.0, 1.0, 0.0), 0, np.random.default_rng(0))

    def test_reproducible(self):
        pars = GevParams(1.0, 2.0, -0.1)
        a = gev_sample(pars, 50, np.random.default_rng(42))
        b = gev_sample(pars, 50, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_in_support(self):
        pars = GevParams(0.0, 1.0, -0.4)
        x = gev_sample(pars, 1000, np.random.default_rng(1))
        assert bool(np.all(pars.support(x)))

    @pytest.mark.parametrize("xi", [-0.2, 0.0, 0.25])
    def test_kolmogorov_smirnov(self, xi):
        from scipy.stats import kstest

        pars = GevParams(3.0, 2.0, xi)
        x = gev_sample(pars, 100_000, np.random.default_rng(202))
        stat, pvalue = kstest(x, lambda z: gev_cdf(pars, z))
        assert pvalue > 1e-4, (stat, pvalue)


class TestLoglikTotal:
    def test_matches_sum_of_densities(self):
        pars = GevParams(5.0, 2.0, 0.15)
        x = gev_sample(pars, 500, np.random.default_rng(3))
        ref = float(np.sum(gev_log_density(pars, x)))
        assert gev_loglik_total(x, 5.0, 2.0, 0.15) == pytest.approx(ref, rel=1e-12)

    def test_off_support_is_neg_inf(self):
        x = np.array([1.0, 2.0, 3.0])
        assert gev_loglik_total(x, 50.0, 2.0, 0.5) == -np.inf


class TestScoreAgainstFiniteDifferences:
    """The closed-form log-density must differentiate consistently in z.

    Guards the reduced-variable algebra: d/dz log f should match central
    finite differences everywhere in the interior of the support.
    """

    @pytest.mark.parametrize("xi", [-0.3, -1e-4, 0.0, 1e-4, 0.2])
    def test_density_is_cdf_derivative(self, xi):
        pars = GevParams(1.0, 2.0, xi)
        h = 1e-6
        for z in (-1.0, 0.5, 2.0, 6.0):
            if not (pars.support(z - h) and pars.support(z + h)):
                continue
            fd = (gev_cdf(pars, z + h) - gev_cdf(pars, z - h)) / (2 * h)
            assert math.exp(gev_log_density(pars, z)) == pytest.approx(fd, rel=1e-7)
