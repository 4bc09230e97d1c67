"""Monte Carlo EM fitting loop for the two-layer spatial extremes model.

Each iteration draws N_k latent location fields given the current
parameters (E-step), then maximizes the draw-averaged complete-data
log-likelihood separately over the GEV data layer and the Gaussian-process
layer (M-step); N_k grows by 10% per iteration from N_1 = 10 D.

The data layer is maximized per source with a Nelder-Mead simplex over
(psi0, psi1, xi); the process layer profiles out the mean coefficients by
generalized least squares on the draw mean and searches only (sigma^2,
phi, delta) numerically.  Both steps are guarded so the objective never
decreases within an iteration.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from gevfield.exceptions import FitError, GevfieldError, InputError, NumericalError
from gevfield.gev import gev_loglik_total
from gevfield.gp import LatentFieldDraws
from gevfield.linalg import CholeskyFactor
from gevfield.model import (
    DataLayerParams,
    JointDataset,
    ProcessLayerParams,
    location_design,
    source_index,
)
from gevfield.sampler import SamplerConfig, sample_latent_field
from gevfield.spatial import CovarianceSpec, covariance_matrix, pairwise_distances
from gevfield.uncertainty import (
    InfoMatrices,
    fisher_covariance_theta2,
    pair_differences,
    process_average_loglik,
    process_suffstats,
    sandwich_covariance,
)

EULER_GAMMA = 0.5772156649015329
_PENALTY = 1e10


@dataclass(frozen=True)
class FitConfig:
    """Settings for the MCEM loop.

    The stopping rule is a fixed iteration budget; ``stop_tol`` optionally
    adds an early exit when every parameter's relative change stays below
    the tolerance for ``stop_window`` consecutive iterations.
    """

    n_iterations: int = 100
    n_start_factor: int = 10
    n_growth: float = 1.1
    burn_in: int = 500
    reburn_in: int = 150
    thin: int = 1
    tau: float = 0.0
    fix_tau: bool = True
    clamp_gp: bool = False
    stop_tol: float | None = None
    stop_window: int = 10
    restart_budget: int = 3
    compute_uncertainty: bool = True
    final_draws: int | None = None
    theta1_start: DataLayerParams | None = None
    theta2_start: ProcessLayerParams | None = None

    def __post_init__(self):
        if self.n_iterations < 1:
            raise InputError(f"n_iterations must be >= 1, got {self.n_iterations}")
        if self.n_start_factor < 1:
            raise InputError("n_start_factor must be >= 1")
        if self.n_growth < 1.0:
            raise InputError("n_growth must be >= 1")
        if self.burn_in < 0 or self.reburn_in < 0:
            raise InputError("burn-in lengths must be >= 0")
        if self.thin < 1:
            raise InputError("thin must be >= 1")
        if self.tau < 0.0:
            raise InputError("tau must be >= 0")
        if self.stop_tol is not None and self.stop_tol <= 0.0:
            raise InputError("stop_tol must be positive when set")
        if self.final_draws is not None and self.final_draws < 1:
            raise InputError("final_draws must be >= 1 when set")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Fitted parameters with the per-iteration trace and final draws."""

    theta1: DataLayerParams
    theta2: ProcessLayerParams
    trace: tuple[dict, ...]
    final_draws: LatentFieldDraws
    info: InfoMatrices | None = None

    def parameter_table(self) -> dict[str, float]:
        out = dict(zip(self.theta1.names(), self.theta1.as_vector()))
        out.update(zip(self.theta2.names(), self.theta2.as_vector()))
        return out


def n_schedule(n_sites: int, cfg: FitConfig) -> list[int]:
    """Per-iteration draw counts: N_k = ceil(factor * D * growth^(k-1)).

    The small subtraction keeps exact integers exact under the ceiling
    (e.g. 200 * 1.1 evaluates to 220.00000000000003 in floating point).
    """
    base = cfg.n_start_factor * n_sites
    return [
        math.ceil(base * cfg.n_growth ** (k - 1) - 1e-9)
        for k in range(1, cfg.n_iterations + 1)
    ]


def e_step(
    data: JointDataset,
    theta1: DataLayerParams,
    theta2: ProcessLayerParams,
    n: int,
    rng: np.random.Generator,
    burn_in: int = 500,
    thin: int = 1,
    proposal_scale=1.0,
    init: np.ndarray | None = None,
) -> LatentFieldDraws:
    """N conditional draws of the latent field at the current parameters."""
    cfg = SamplerConfig(n_draws=n, burn_in=burn_in, thin=thin, proposal_scale=proposal_scale)
    return sample_latent_field(data, theta1, theta2, cfg, rng, init=init)


# ---------------------------------------------------------------------------
# data layer (theta1) M-step


def _source_groups(data: JointDataset, sources) -> list[list[int]]:
    groups: list[list[int]] = [[] for _ in sources]
    for j, site in enumerate(data.sites):
        groups[source_index(site, sources)].append(j)
    return groups


def _source_neg_objective(vec, diffs, elevs, bounds, n_pairs):
    """Mean negative log-likelihood of one source; penalized off support."""
    psi0, psi1, xi = vec
    total = 0.0
    violation = 0.0
    for d, elev, (lo, hi) in zip(diffs, elevs, bounds):
        try:
            psi = math.exp(psi0 + psi1 * elev)
        except OverflowError:
            return _PENALTY * (1.0 + abs(psi0 + psi1 * elev))
        # support requires 1 + xi * d / psi > 0 at the extreme differences
        worst = 1.0 + xi * (lo if xi > 0 else hi) / psi
        if worst <= 0.0:
            violation += -worst + 1e-12
            continue
        total += gev_loglik_total(d, 0.0, psi, xi)
    if violation > 0.0 or not np.isfinite(total):
        return _PENALTY * (1.0 + violation)
    return -total / n_pairs


def _simplex_search(fun, z0, rng, restart_budget, what):
    """Nelder-Mead with random restarts on reported non-convergence."""
    start = np.asarray(z0, dtype=float)
    attempt = start
    for k in range(restart_budget + 1):
        res = minimize(
            fun,
            attempt,
            method="Nelder-Mead",
            options={"xatol": 1e-6, "fatol": 1e-10, "maxiter": 4000, "maxfev": 4000},
        )
        if res.success:
            return res.x, float(res.fun)
        attempt = start * (1.0 + 0.05 * rng.standard_normal(start.size)) + 0.01 * rng.standard_normal(start.size)
    raise FitError(f"{what} optimizer failed to converge after {restart_budget} restarts")


def m_step_theta1(
    data: JointDataset,
    draws: LatentFieldDraws,
    start: DataLayerParams,
    rng: np.random.Generator | None = None,
    restart_budget: int = 3,
) -> DataLayerParams:
    """Maximize the draw-averaged GEV log-likelihood source by source."""
    rng = rng if rng is not None else np.random.default_rng(0)
    diffs = pair_differences(data, draws)
    bounds = [(float(d.min()), float(d.max())) for d in diffs]
    groups = _source_groups(data, start.sources)

    psi0, psi1, xi = list(start.psi0), list(start.psi1), list(start.xi)
    for k, group in enumerate(groups):
        g_diffs = [diffs[j] for j in group]
        g_elevs = [data.sites[j].elevation for j in group]
        g_bounds = [bounds[j] for j in group]
        n_pairs = sum(d.size for d in g_diffs)
        escale = max(1.0, max(abs(e) for e in g_elevs))

        def neg_obj(z):
            return _source_neg_objective(
                (z[0], z[1] / escale, z[2]), g_diffs, g_elevs, g_bounds, n_pairs
            )

        z0 = np.array([psi0[k], psi1[k] * escale, xi[k]])
        f_start = neg_obj(z0)
        z_best, f_best = _simplex_search(neg_obj, z0, rng, restart_budget, "data-layer")
        if f_best <= f_start:  # monotone guard: never accept a worse point
            psi0[k], psi1[k], xi[k] = z_best[0], z_best[1] / escale, z_best[2]
    return DataLayerParams(start.sources, tuple(psi0), tuple(psi1), tuple(xi))


def data_layer_objective(
    data: JointDataset, draws: LatentFieldDraws, theta1: DataLayerParams
) -> float:
    """(1/N) sum over draws, sites, years of the GEV log-density."""
    diffs = pair_differences(data, draws)
    total = 0.0
    for j, record in enumerate(data.records):
        psi = theta1.psi_at(record.location)
        total += gev_loglik_total(diffs[j], 0.0, psi, theta1.xi_at(record.location))
    return total / draws.n_draws


# ---------------------------------------------------------------------------
# process layer (theta2) M-step


def _delta_to_z(delta: float) -> float:
    d = min(max(delta, 1e-6), 2.0 - 1e-9)
    return math.log(d / (2.0 - d))


def _z_to_delta(z: float) -> float:
    return 2.0 / (1.0 + math.exp(-z))


def _gls_coefficients(design, factor, mu_bar):
    si_x = factor.solve(design)
    a = design.T @ si_x
    b = si_x.T @ mu_bar
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("process design matrix is rank-deficient") from exc


def m_step_theta2(
    draws: LatentFieldDraws,
    sites,
    start: ProcessLayerParams,
    fix_tau: bool = True,
    rng: np.random.Generator | None = None,
    restart_budget: int = 3,
    fix_covariance: bool = False,
) -> ProcessLayerParams:
    """Maximize the draw-averaged GP log-likelihood.

    The mean coefficients are profiled out exactly (GLS on the draw mean),
    so the numerical search runs over (sigma^2, phi, delta) only, plus tau
    when it is not fixed.  With ``fix_covariance`` the covariance is held at
    ``start.cov`` and only the GLS mean update runs; use this when the draws
    are degenerate (zero residual variance drives sigma^2 to the boundary).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    design = location_design(sites, start.sources)
    mu_bar, s_centred = process_suffstats(draws)

    if fix_covariance:
        factor = CholeskyFactor(covariance_matrix(start.cov, sites))
        beta = _gls_coefficients(design, factor, mu_bar)
        return ProcessLayerParams(start.sources, beta, start.cov)

    def profiled_neg(z):
        sigma2, phi, delta = math.exp(z[0]), math.exp(z[1]), _z_to_delta(z[2])
        tau = math.exp(z[3]) if not fix_tau else start.cov.tau
        try:
            spec = CovarianceSpec(sigma2, tau, phi, delta)
            factor = CholeskyFactor(covariance_matrix(spec, sites))
            beta = _gls_coefficients(design, factor, mu_bar)
            value = process_average_loglik(sites, design, mu_bar, s_centred, beta, spec)
        except GevfieldError:
            return _PENALTY
        if not np.isfinite(value):
            return _PENALTY
        return -value

    z0 = [math.log(max(start.cov.sigma2, 1e-8)), math.log(start.cov.phi), _delta_to_z(start.cov.delta)]
    if not fix_tau:
        z0.append(math.log(max(start.cov.tau, 1e-4)))
    z0 = np.array(z0)
    f_start = profiled_neg(z0)
    z_best, f_best = _simplex_search(profiled_neg, z0, rng, restart_budget, "process-layer")
    if f_best > f_start:  # monotone guard
        z_best = z0
    sigma2, phi, delta = math.exp(z_best[0]), math.exp(z_best[1]), _z_to_delta(z_best[2])
    tau = math.exp(z_best[3]) if not fix_tau else start.cov.tau
    spec = CovarianceSpec(sigma2, tau, phi, delta)
    beta = _gls_coefficients(design, CholeskyFactor(covariance_matrix(spec, sites)), mu_bar)
    return ProcessLayerParams(start.sources, beta, spec)


def process_layer_objective(
    draws: LatentFieldDraws, sites, theta2: ProcessLayerParams
) -> float:
    """(1/N) sum over draws of the GP log-density at theta2."""
    design = location_design(sites, theta2.sources)
    mu_bar, s_centred = process_suffstats(draws)
    return process_average_loglik(sites, design, mu_bar, s_centred, theta2.beta, theta2.cov)


# ---------------------------------------------------------------------------
# initialization


def _marginal_gev_fit(values: np.ndarray) -> tuple[float, float, float]:
    """Per-site (mu, psi, xi) ML fit started from moment estimates."""
    mean, sd = float(np.mean(values)), float(np.std(values, ddof=1))
    psi_m = max(sd * math.sqrt(6.0) / math.pi, 1e-6)
    mu_m = mean - EULER_GAMMA * psi_m
    z0 = np.array([mu_m, math.log(psi_m), 0.1])

    def neg(z):
        ll = gev_loglik_total(values, z[0], math.exp(z[1]), z[2])
        return -ll if np.isfinite(ll) else _PENALTY

    res = minimize(neg, z0, method="Nelder-Mead",
                   options={"xatol": 1e-6, "fatol": 1e-9, "maxfev": 2000})
    z = res.x if res.success and res.fun < neg(z0) else z0
    return float(z[0]), float(math.exp(z[1])), float(z[2])


def initialize_parameters(
    data: JointDataset, tau: float = 0.0
) -> tuple[DataLayerParams, ProcessLayerParams]:
    """Starting values from independent per-site GEV fits.

    Per source, log psi-hat is regressed on elevation and xi-hat averaged;
    the location coefficients come from OLS of mu-hat on the covariate
    design, with the residual variance seeding sigma^2.
    """
    sources = data.source_order()
    sites = data.sites
    fits = np.array([_marginal_gev_fit(r.values_array) for r in data.records])
    mu_hat, psi_hat, xi_hat = fits[:, 0], fits[:, 1], fits[:, 2]

    psi0, psi1, xi = [], [], []
    for k, group in enumerate(_source_groups(data, sources)):
        elevs = np.array([sites[j].elevation for j in group])
        logpsi = np.log(psi_hat[group])
        if len(group) >= 2 and np.ptp(elevs) > 1e-9:
            slope, intercept = np.polyfit(elevs, logpsi, 1)
        else:
            slope, intercept = 0.0, float(np.mean(logpsi))
        psi0.append(float(intercept))
        psi1.append(float(slope))
        xi.append(float(np.clip(np.mean(xi_hat[group]), -0.4, 0.4)))
    theta1 = DataLayerParams(sources, tuple(psi0), tuple(psi1), tuple(xi))

    design = location_design(sites, sources)
    beta, *_ = np.linalg.lstsq(design, mu_hat, rcond=None)
    resid = mu_hat - design @ beta
    dof = max(len(sites) - design.shape[1], 1)
    sigma2 = max(float(resid @ resid) / dof, 1e-2)
    dists = pairwise_distances(sites)
    off_diag = dists[np.triu_indices(len(sites), k=1)]
    phi = max(float(np.median(off_diag)) / 2.0, 1e-2) if off_diag.size else 1.0
    theta2 = ProcessLayerParams(sources, beta, CovarianceSpec(sigma2, tau, phi, 1.0))
    return theta1, theta2


# ---------------------------------------------------------------------------
# the EM loop


def _trace_row(k, n_k, theta1, theta2, q1_start, q2_start, q1, q2):
    row = {"iteration": k, "n_draws": n_k,
           "mc_objective_start": q1_start + q2_start, "mc_objective": q1 + q2}
    row.update(zip(theta1.names(), theta1.as_vector()))
    row.update(zip(theta2.names(), theta2.as_vector()))
    return row


def fit_joint_model(
    data: JointDataset,
    cfg: FitConfig = FitConfig(),
    rng: np.random.Generator | None = None,
) -> FitResult:
    """Run the full MCEM fit; see the module docstring for the loop shape.

    With no generator supplied the fit is deterministic (seed 0).  A failed
    iteration raises FitError carrying the trace accumulated so far.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if cfg.theta1_start is not None:
        theta1 = cfg.theta1_start
        theta2 = cfg.theta2_start
        if theta2 is None:
            _, theta2 = initialize_parameters(data, tau=cfg.tau)
    else:
        theta1, theta2 = initialize_parameters(data, tau=cfg.tau)
        if cfg.theta2_start is not None:
            theta2 = cfg.theta2_start
    if cfg.clamp_gp:
        theta2 = ProcessLayerParams(
            theta2.sources, theta2.beta, CovarianceSpec(0.0, 0.0, theta2.cov.phi, theta2.cov.delta)
        )
    clamped = theta2.cov.sigma2 == 0.0 and theta2.cov.tau == 0.0

    schedule = n_schedule(data.n_sites, cfg)
    sites = data.sites
    trace: list[dict] = []
    chain_state = None
    proposal_scale = 1.0
    prev_vec = None
    quiet_iterations = 0

    try:
        for k, n_k in enumerate(schedule, start=1):
            burn = cfg.burn_in if k == 1 else cfg.reburn_in
            draws = e_step(
                data, theta1, theta2, n_k, rng,
                burn_in=burn, thin=cfg.thin, proposal_scale=proposal_scale, init=chain_state,
            )
            if not draws.meta.get("degenerate", False):
                chain_state = draws.draws[-1].copy()
                proposal_scale = draws.meta["proposal_scales"]

            q1_start = data_layer_objective(data, draws, theta1)
            q2_start = 0.0 if clamped else process_layer_objective(draws, sites, theta2)

            theta1 = m_step_theta1(data, draws, theta1, rng, cfg.restart_budget)
            if not clamped:
                theta2 = m_step_theta2(
                    draws, sites, theta2, fix_tau=cfg.fix_tau,
                    rng=rng, restart_budget=cfg.restart_budget,
                )
            q1 = data_layer_objective(data, draws, theta1)
            q2 = 0.0 if clamped else process_layer_objective(draws, sites, theta2)
            trace.append(_trace_row(k, n_k, theta1, theta2, q1_start, q2_start, q1, q2))

            if cfg.stop_tol is not None:
                vec = np.concatenate([theta1.as_vector(), theta2.as_vector()])
                if prev_vec is not None:
                    rel = np.max(np.abs(vec - prev_vec) / np.maximum(1e-8, np.abs(prev_vec)))
                    quiet_iterations = quiet_iterations + 1 if rel < cfg.stop_tol else 0
                    if quiet_iterations >= cfg.stop_window:
                        break
                prev_vec = vec
    except GevfieldError as exc:
        if isinstance(exc, FitError):
            raise FitError(f"iteration {len(trace) + 1}: {exc}", trace=tuple(trace)) from exc
        raise FitError(
            f"iteration {len(trace) + 1} failed: {exc}", trace=tuple(trace)
        ) from exc

    final_n = cfg.final_draws if cfg.final_draws is not None else schedule[-1]
    final_draws = e_step(
        data, theta1, theta2, final_n, rng,
        burn_in=cfg.reburn_in, thin=cfg.thin, proposal_scale=proposal_scale, init=chain_state,
    )

    info = None
    if cfg.compute_uncertainty:
        info = sandwich_covariance(data, final_draws, theta1)
        if not clamped:
            try:
                fisher = fisher_covariance_theta2(final_draws, sites, theta2)
            except NumericalError as exc:
                warnings.warn(f"process-layer Fisher covariance unavailable: {exc}")
                fisher = None
            info = replace(info, fisher_cov_theta2=fisher)
    return FitResult(theta1, theta2, tuple(trace), final_draws, info)


fit = fit_joint_model
