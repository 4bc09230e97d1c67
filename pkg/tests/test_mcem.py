"""Tests for the MCEM fitting loop and its M-steps.

The two M-steps get independent statistical oracles (large-sample ML
recovery with uncertainty-based tolerances, exact GLS on degenerate draws)
before the loop-level tests, so a failure localizes to one maximizer
rather than to the whole EM composition.
"""

import math
from fractions import Fraction

import numpy as np
import pytest

from gevfield.exceptions import FitError
from gevfield.gev import GevParams, gev_sample
from gevfield.gp import LatentFieldDraws
from gevfield.linalg import CholeskyFactor
from gevfield.mcem import (
    FitConfig,
    data_layer_objective,
    e_step,
    fit,
    fit_joint_model,
    initialize_parameters,
    m_step_theta1,
    m_step_theta2,
    n_schedule,
    process_layer_objective,
)
from gevfield.model import (
    DataLayerParams,
    JointDataset,
    ProcessLayerParams,
    SiteRecord,
    location_design,
)
from gevfield.spatial import CovarianceSpec, Location, SourceTag, covariance_matrix
from gevfield.uncertainty import (
    fisher_covariance_theta2,
    process_average_loglik,
    process_suffstats,
    sandwich_covariance,
)

ONE_SOURCE = (SourceTag.FIELD,)


def field_site(east, north, elevation=0.0):
    # lon/lat track the planar coordinates so the mean design has full rank
    return Location(east, north, east / 100.0, north / 100.0, elevation, SourceTag.FIELD)


def one_source_theta1(psi0, psi1, xi):
    return DataLayerParams(ONE_SOURCE, (psi0,), (psi1,), (xi,))


def dataset_from_values(values_per_site, sites):
    records = []
    for k, (vals, site) in enumerate(zip(values_per_site, sites)):
        years = tuple(range(2000, 2000 + len(vals)))
        records.append(SiteRecord(f"s{k}", site, years, tuple(float(v) for v in vals)))
    return JointDataset(tuple(records), (0.0, 0.0))


def random_sites(rng, d, side=80.0, max_elev=1000.0):
    return [
        field_site(
            float(rng.uniform(0, side)),
            float(rng.uniform(0, side)),
            float(rng.uniform(0, max_elev)),
        )
        for _ in range(d)
    ]


def simulate_world(rng, sites, theta1, theta2, t):
    """Latent field from the GP, then per-site GEV maxima around it."""
    cov = covariance_matrix(theta2.cov, sites)
    mus = theta2.mean_at(sites) + CholeskyFactor(cov).lower @ rng.standard_normal(len(sites))
    values = [
        gev_sample(GevParams(mus[j], theta1.psi_at(s), theta1.xi_at(s)), t, rng)
        for j, s in enumerate(sites)
    ]
    return dataset_from_values(values, sites), mus


class TestSchedule:
    def test_matches_exact_rational_arithmetic(self):
        cfg = FitConfig()
        schedule = n_schedule(20, cfg)
        assert len(schedule) == 100
        # ceil(200 * 1.1^(k-1)) computed exactly; float rounding must not
        # push integer-valued entries like 220 and 242 up by one
        exact = [math.ceil(200 * Fraction(11, 10) ** k) for k in range(100)]
        assert schedule == exact
        assert schedule[:10] == [200, 220, 242, 267, 293, 323, 355, 390, 429, 472]

    def test_flat_schedule_when_growth_is_one(self):
        cfg = FitConfig(n_iterations=7, n_start_factor=5, n_growth=1.0)
        assert n_schedule(9, cfg) == [45] * 7


class TestEStep:
    def test_single_draw_has_one_row(self):
        rng = np.random.default_rng(3)
        sites = random_sites(rng, 4)
        theta1 = one_source_theta1(math.log(6.0), 0.0, 0.1)
        theta2 = ProcessLayerParams(
            ONE_SOURCE, np.array([40.0, 0.0, 0.0, 0.0]), CovarianceSpec(2.0, 0.0, 20.0, 1.0)
        )
        data, _ = simulate_world(rng, sites, theta1, theta2, t=15)
        draws = e_step(data, theta1, theta2, 1, rng, burn_in=50)
        assert draws.draws.shape == (1, 4)

    def test_degenerate_prior_pins_draws_at_mean_surface(self):
        rng = np.random.default_rng(4)
        sites = random_sites(rng, 5)
        theta1 = one_source_theta1(math.log(6.0), 0.0, 0.1)
        theta2 = ProcessLayerParams(
            ONE_SOURCE, np.array([40.0, 0.002, -1.0, 3.0]), CovarianceSpec(0.0, 0.0, 20.0, 1.0)
        )
        data, _ = simulate_world(
            rng, sites, theta1,
            ProcessLayerParams(ONE_SOURCE, theta2.beta, CovarianceSpec(2.0, 0.0, 20.0, 1.0)),
            t=12,
        )
        draws = e_step(data, theta1, theta2, 6, rng, burn_in=10)
        assert draws.meta["degenerate"]
        assert np.array_equal(draws.draws, np.tile(theta2.mean_at(sites), (6, 1)))


def observed_info_se(values, mu, psi0, xi):
    """SEs of (psi0, xi) for one site: inverse FD Hessian of the loglik.

    The elevation slope is excluded -- at a single site it carries no
    information and would make the full sandwich singular.
    """
    from gevfield.gev import gev_loglik_total

    def ll(v):
        return gev_loglik_total(values, mu, math.exp(v[0]), v[1])

    h = 1e-4
    centre = np.array([psi0, xi])
    hess = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            pts = []
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                v = centre.copy()
                v[i] += si * h
                v[j] += sj * h
                pts.append(ll(v))
            hess[i, j] = (pts[0] - pts[1] - pts[2] + pts[3]) / (4 * h * h)
    return np.sqrt(np.diag(np.linalg.inv(-hess)))


class TestMStepTheta1:
    def test_single_site_recovery_with_known_location(self):
        # mu fixed and known, so the maximizer sees a plain two-parameter
        # GEV ML problem; observed-information SEs calibrate the tolerance
        rng = np.random.default_rng(11)
        psi_true, xi_true, mu = 8.0, 0.15, 40.0
        sites = [field_site(0.0, 0.0, elevation=0.0)]
        values = gev_sample(GevParams(mu, psi_true, xi_true), 10_000, rng)
        data = dataset_from_values([values], sites)
        draws = LatentFieldDraws(np.array([[mu]]), sites)

        start = one_source_theta1(math.log(6.0), 0.0, 0.05)
        result = m_step_theta1(data, draws, start)
        se = observed_info_se(values, mu, result.psi0[0], result.xi[0])

        assert abs(result.psi0[0] - math.log(psi_true)) < 2 * se[0]
        assert abs(result.xi[0] - xi_true) < 2 * se[1]

    def test_elevation_slope_recovery(self):
        rng = np.random.default_rng(12)
        psi1_true = 4e-4
        sites = [field_site(10.0 * k, 0.0, elevation=200.0 * k) for k in range(6)]
        theta1 = one_source_theta1(math.log(7.0), psi1_true, 0.1)
        mus = np.array([30.0, 45.0, 38.0, 55.0, 41.0, 60.0])
        values = [
            gev_sample(GevParams(mus[j], theta1.psi_at(s), 0.1), 800, rng)
            for j, s in enumerate(sites)
        ]
        data = dataset_from_values(values, sites)
        draws = LatentFieldDraws(mus[None, :], sites)

        start = one_source_theta1(math.log(5.0), 0.0, 0.0)
        result = m_step_theta1(data, draws, start)
        se = sandwich_covariance(data, draws, result).theta1_se()
        assert abs(result.psi1[0] - psi1_true) < 2 * se[1]

    def test_objective_never_decreases(self):
        rng = np.random.default_rng(13)
        sites = random_sites(rng, 5)
        theta1 = one_source_theta1(math.log(6.0), 2e-4, 0.1)
        theta2 = ProcessLayerParams(
            ONE_SOURCE, np.array([45.0, 0.01, 0.0, 0.0]), CovarianceSpec(3.0, 0.0, 25.0, 1.2)
        )
        data, mus = simulate_world(rng, sites, theta1, theta2, t=25)
        draws = LatentFieldDraws(mus[None, :] + rng.normal(0, 0.5, (40, 5)), sites)

        start = one_source_theta1(math.log(4.0), 0.0, -0.1)
        result = m_step_theta1(data, draws, start)
        assert data_layer_objective(data, draws, result) >= (
            data_layer_objective(data, draws, start) - 1e-12
        )


class TestMStepTheta2:
    def _theta2(self, beta, sigma2, phi, delta, tau=0.0):
        return ProcessLayerParams(ONE_SOURCE, np.asarray(beta, float), CovarianceSpec(sigma2, tau, phi, delta))

    def test_zero_residual_draws_recover_mean_exactly(self):
        rng = np.random.default_rng(21)
        sites = random_sites(rng, 12)
        beta_true = np.array([35.0, 0.004, -1.5, 2.0])
        mean = location_design(sites, ONE_SOURCE) @ beta_true
        draws = LatentFieldDraws(np.tile(mean, (5, 1)), sites)

        start = self._theta2([0.0, 0.0, 0.0, 0.0], sigma2=1.0, phi=10.0, delta=1.0)
        result = m_step_theta2(draws, sites, start, fix_covariance=True)
        np.testing.assert_allclose(result.beta, beta_true, rtol=0, atol=1e-8)
        assert result.cov == start.cov

    def test_recovers_gp_parameters_from_many_draws(self):
        # 10^4 independent draws from a known GP; the observed information
        # for one draw, scaled by 1/N, calibrates the tolerance.
        rng = np.random.default_rng(22)
        n, d = 10_000, 20
        sites = random_sites(rng, d, side=100.0)
        truth = self._theta2([30.0, 0.005, -2.0, 1.0], sigma2=3.0, phi=20.0, delta=1.4)
        mean = truth.mean_at(sites)
        lower = CholeskyFactor(covariance_matrix(truth.cov, sites)).lower
        draws = LatentFieldDraws(mean + (lower @ rng.standard_normal((d, n))).T, sites)

        start = self._theta2([20.0, 0.0, 0.0, 0.0], sigma2=1.5, phi=8.0, delta=1.0)
        result = m_step_theta2(draws, sites, start)

        info = fisher_covariance_theta2(draws, sites, result)
        se_one_draw = np.sqrt(np.diag(info))
        se_sigma_mu, se_phi = se_one_draw[4] / math.sqrt(n), se_one_draw[5] / math.sqrt(n)
        assert abs(math.sqrt(result.cov.sigma2) - math.sqrt(3.0)) < 2 * se_sigma_mu
        assert abs(result.cov.phi - 20.0) < 2 * se_phi

    def test_profiled_optimum_matches_full_objective(self):
        rng = np.random.default_rng(23)
        sites = random_sites(rng, 8)
        truth = self._theta2([25.0, 0.002, 1.0, -1.0], sigma2=2.0, phi=15.0, delta=1.1)
        mean = truth.mean_at(sites)
        lower = CholeskyFactor(covariance_matrix(truth.cov, sites)).lower
        draws = LatentFieldDraws(mean + (lower @ rng.standard_normal((8, 200))).T, sites)

        start = self._theta2([0.0, 0.0, 0.0, 0.0], sigma2=1.0, phi=5.0, delta=1.0)
        result = m_step_theta2(draws, sites, start)

        # evaluating the full objective at the returned (beta, covariance)
        # must reproduce the profiled value computed from sufficient stats
        design = location_design(sites, ONE_SOURCE)
        mu_bar, s_centred = process_suffstats(draws)
        profiled = process_average_loglik(sites, design, mu_bar, s_centred, result.beta, result.cov)
        full = process_layer_objective(draws, sites, result)
        assert abs(full - profiled) < 1e-10

        assert full >= process_layer_objective(draws, sites, start) - 1e-12


class TestInitialization:
    def test_starting_values_are_sane(self):
        rng = np.random.default_rng(31)
        sites = random_sites(rng, 10)
        theta1 = one_source_theta1(math.log(7.0), 3e-4, 0.12)
        theta2 = ProcessLayerParams(
            ONE_SOURCE, np.array([42.0, 0.01, -0.5, 0.8]), CovarianceSpec(4.0, 0.0, 30.0, 1.3)
        )
        data, _ = simulate_world(rng, sites, theta1, theta2, t=40)

        t1, t2 = initialize_parameters(data)
        assert abs(t1.psi0[0] - math.log(7.0)) < 1.0
        assert abs(t1.xi[0]) <= 0.4
        assert t2.cov.sigma2 > 0 and t2.cov.phi > 0 and t2.cov.delta == 1.0
        assert np.all(np.isfinite(t2.beta))

    def test_two_sources_get_separate_scale_fits(self):
        rng = np.random.default_rng(32)
        sites_f = random_sites(rng, 4)
        sites_m = [
            Location(s.east + 5, s.north, s.lon, s.lat, s.elevation, SourceTag.SIMULATOR)
            for s in random_sites(rng, 4)
        ]
        values = [gev_sample(GevParams(40.0, 6.0, 0.1), 30, rng) for _ in range(8)]
        data = dataset_from_values(values, sites_f + sites_m)

        t1, t2 = initialize_parameters(data)
        assert len(t1.psi0) == 2 and len(t1.xi) == 2
        assert t2.beta.shape == (8,)


class TestFit:
    def _world(self, rng, d=6, t=30):
        sites = random_sites(rng, d)
        theta1 = one_source_theta1(math.log(6.0), 3e-4, 0.12)
        theta2 = ProcessLayerParams(
            ONE_SOURCE, np.array([40.0, 0.01, -0.5, 0.8]), CovarianceSpec(4.0, 0.0, 30.0, 1.3)
        )
        data, _ = simulate_world(rng, sites, theta1, theta2, t=t)
        return data

    def test_single_iteration_equals_manual_cycle(self):
        data = self._world(np.random.default_rng(41), d=5, t=25)
        cfg = FitConfig(n_iterations=1, burn_in=80, compute_uncertainty=False, final_draws=3)
        result = fit_joint_model(data, cfg, rng=np.random.default_rng(7))

        rng = np.random.default_rng(7)
        t1, t2 = initialize_parameters(data)
        draws = e_step(data, t1, t2, n_schedule(5, cfg)[0], rng, burn_in=80)
        t1 = m_step_theta1(data, draws, t1, rng)
        t2 = m_step_theta2(draws, data.sites, t2, fix_tau=True, rng=rng)

        np.testing.assert_allclose(result.theta1.as_vector(), t1.as_vector(), rtol=1e-12)
        np.testing.assert_allclose(result.theta2.as_vector(), t2.as_vector(), rtol=1e-12)

    def test_trace_schedule_and_ascent(self):
        data = self._world(np.random.default_rng(42))
        cfg = FitConfig(n_iterations=8, burn_in=200, reburn_in=80, final_draws=60)
        result = fit_joint_model(data, cfg, rng=np.random.default_rng(8))

        assert len(result.trace) == 8
        assert [row["n_draws"] for row in result.trace] == n_schedule(6, cfg)
        ascents = [row["mc_objective"] >= row["mc_objective_start"] - 1e-9 for row in result.trace]
        assert np.mean(ascents) >= 0.9

        assert result.final_draws.n_draws == 60
        assert result.info is not None
        assert np.all(result.info.theta1_se() > 0)
        table = result.parameter_table()
        assert set(table) == {
            "psi_F_0", "psi_F_1", "xi_F",
            "mu_F_0", "mu_F_1", "mu_F_2", "mu_F_3", "sigma_mu", "phi", "delta", "tau",
        }

    def test_clamped_gp_matches_pooled_regression(self):
        data = self._world(np.random.default_rng(43))
        cfg = FitConfig(n_iterations=3, clamp_gp=True, compute_uncertainty=False, final_draws=2)
        result = fit_joint_model(data, cfg, rng=np.random.default_rng(9))

        # with sigma2 = tau = 0 the draws are pinned at m(s), so the fit
        # must agree with one deterministic pooled regression from the
        # same starting point
        t1, t2 = initialize_parameters(data)
        m = ProcessLayerParams(
            t2.sources, t2.beta, CovarianceSpec(0.0, 0.0, t2.cov.phi, t2.cov.delta)
        ).mean_at(data.sites)
        pooled = m_step_theta1(data, LatentFieldDraws(np.tile(m, (1, 1)), data.sites), t1)
        np.testing.assert_allclose(result.theta1.as_vector(), pooled.as_vector(), rtol=1e-4)

    def test_two_starts_reach_the_same_answer(self):
        data = self._world(np.random.default_rng(44), d=6, t=40)
        base = dict(n_iterations=10, burn_in=200, reburn_in=80, compute_uncertainty=False, final_draws=2)
        cfg_a = FitConfig(**base)
        cfg_b = FitConfig(
            **base,
            theta1_start=one_source_theta1(math.log(3.0), 0.0, -0.05),
        )
        a = fit_joint_model(data, cfg_a, rng=np.random.default_rng(10))
        b = fit_joint_model(data, cfg_b, rng=np.random.default_rng(20))

        np.testing.assert_allclose(
            a.theta1.as_vector(), b.theta1.as_vector(), rtol=0.15, atol=0.02
        )
        np.testing.assert_allclose(a.theta2.beta, b.theta2.beta, rtol=0.15, atol=1.5)

    def test_early_stop_window(self):
        data = self._world(np.random.default_rng(45), d=4, t=15)
        cfg = FitConfig(
            n_iterations=10, burn_in=60, reburn_in=30, stop_tol=1e10, stop_window=2,
            compute_uncertainty=False, final_draws=2,
        )
        result = fit_joint_model(data, cfg, rng=np.random.default_rng(11))
        # every change is "quiet" under a huge tolerance: the first
        # iteration seeds the window, two more fill it
        assert len(result.trace) == 3

    def test_off_support_start_raises_with_trace(self):
        data = self._world(np.random.default_rng(46), d=4, t=15)
        cfg = FitConfig(
            n_iterations=3, burn_in=40,
            theta1_start=one_source_theta1(math.log(6.0), 0.0, -5.0),
            compute_uncertainty=False,
        )
        with pytest.raises(FitError, match="iteration 1"):
            try:
                fit_joint_model(data, cfg, rng=np.random.default_rng(12))
            except FitError as err:
                assert err.trace == ()
                raise

    def test_fit_alias(self):
        assert fit is fit_joint_model
