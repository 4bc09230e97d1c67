"""Parameter-uncertainty estimation: sandwich for the data layer, Fisher for the process layer.

The data-layer covariance is the robust H^{-1} J H^{-1} form evaluated on
the final latent draws: J averages per-observation score outer products
over draws, H is the Hessian of the draw-averaged log-likelihood (central
finite differences of the analytic score, so the error is O(h^2) without
hand-deriving second derivatives of the GEV density in xi).

Process-layer uncertainty is the usual observed Fisher information of the
draw-averaged Gaussian log-likelihood in (mean coefficients, sigma_mu, phi,
delta); the nugget stays fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gevfield.exceptions import InputError, NumericalError
from gevfield.gev import XI_SWITCH, _reduced_w
from gevfield.gp import LatentFieldDraws
from gevfield.linalg import CholeskyFactor
from gevfield.model import (
    DataLayerParams,
    JointDataset,
    ProcessLayerParams,
    location_design,
    source_index,
)
from gevfield.spatial import CovarianceSpec, Location, covariance_matrix

FD_STEP = 1e-5


@dataclass(frozen=True, eq=False)
class InfoMatrices:
    """Information matrices and derived covariances for a fit."""

    J: np.ndarray
    H: np.ndarray
    sandwich_cov: np.ndarray
    fisher_cov_theta2: np.ndarray | None = None

    def theta1_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sandwich_cov))

    def naive_cov(self) -> np.ndarray:
        """Fisher-style covariance ignoring misspecification: (-H)^{-1}."""
        return np.linalg.inv(-self.H)

    def naive_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.naive_cov()))


def _gev_score_terms(x: np.ndarray, mu: np.ndarray, psi: float, xi: float):
    """Per-observation (d l / d psi, d l / d xi) for broadcastable x, mu.

    Stable in the Gumbel limit; raises off the support.
    """
    u = (np.asarray(x, float) - np.asarray(mu, float)) / psi
    if abs(xi) < XI_SWITCH:
        emu = np.exp(-u)
        d_psi = (-1.0 + u * (1.0 - emu)) / psi
        d_xi = -u + 0.5 * u * u * (1.0 - emu)
        return d_psi, d_xi
    a = 1.0 + xi * u
    if np.any(a <= 0.0):
        raise InputError("score undefined: observation off the GEV support")
    w = _reduced_w(u, xi)
    emw = np.exp(-w)
    # d l / d psi = -1/psi + (u/psi) [ (1+xi)/a - e^{-w}/a ]
    d_psi = (-1.0 + u * ((1.0 + xi) - emw) / a) / psi
    dw_dxi = (u / a - w) / xi
    d_xi = -w + dw_dxi * (emw - (1.0 + xi))
    return d_psi, d_xi


def _theta1_block_indices(k: int, n_sources: int) -> list[int]:
    """Positions of source k's (psi0, psi1, xi) in the theta1 vector layout."""
    return [2 * k, 2 * k + 1, 2 * n_sources + k]


def score_contribution(
    theta1: DataLayerParams, x: float, mu: float, site: Location
) -> np.ndarray:
    """Gradient of one observation's GEV log-density in the full theta1 layout.

    Chain rule through psi(s) = exp{psi0 + psi1 * elevation}: the psi0
    component is (dl/dpsi) psi and the psi1 component scales by elevation.
    """
    n = len(theta1.sources)
    k = source_index(site, theta1.sources)
    psi = theta1.psi_at(site)
    d_psi, d_xi = _gev_score_terms(np.asarray(x, float), np.asarray(mu, float), psi, theta1.xi[k])
    out = np.zeros(3 * n)
    i0, i1, ix = _theta1_block_indices(k, n)
    out[i0] = float(d_psi) * psi
    out[i1] = float(d_psi) * psi * site.elevation
    out[ix] = float(d_xi)
    return out


def pair_differences(data: JointDataset, draws: LatentFieldDraws) -> list[np.ndarray]:
    """Per site, the flattened (N*T_j,) array of draws paired against maxima.

    Returned as (x - mu) differences ready for score evaluation; computed
    once and reused across parameter perturbations.
    """
    out = []
    for j, record in enumerate(data.records):
        x = record.values_array
        mu = draws.draws[:, j]
        out.append((x[None, :] - mu[:, None]).ravel())
    return out


def _score_sums_and_outer(
    data: JointDataset,
    diffs: list[np.ndarray],
    theta1: DataLayerParams,
    want_outer: bool,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Total score (draw-averaged) and, optionally, the outer-product sum J."""
    n = len(theta1.sources)
    p = 3 * n
    total = np.zeros(p)
    outer = np.zeros((p, p)) if want_outer else None
    for j, record in enumerate(data.records):
        site = record.location
        k = source_index(site, theta1.sources)
        psi = theta1.psi_at(site)
        d_psi, d_xi = _gev_score_terms(diffs[j], 0.0, psi, theta1.xi[k])
        if not (np.all(np.isfinite(d_psi)) and np.all(np.isfinite(d_xi))):
            raise NumericalError(f"non-finite score at site {record.site_id}")
        i0, i1, ix = _theta1_block_indices(k, n)
        elev = site.elevation
        s0 = d_psi * psi
        total[i0] += s0.sum()
        total[i1] += s0.sum() * elev
        total[ix] += d_xi.sum()
        if want_outer:
            s00 = float(s0 @ s0)
            s0x = float(s0 @ d_xi)
            sxx = float(d_xi @ d_xi)
            outer[i0, i0] += s00
            outer[i0, i1] += s00 * elev
            outer[i1, i1] += s00 * elev * elev
            outer[i0, ix] += s0x
            outer[i1, ix] += s0x * elev
            outer[ix, ix] += sxx
    return total, outer


def sandwich_covariance(
    data: JointDataset, draws: LatentFieldDraws, theta1: DataLayerParams
) -> InfoMatrices:
    """J, H and the robust covariance H^{-1} J H^{-1} at theta1.

    J = (1/N) sum_i sum_j sum_t of score outer products; H is the Hessian
    of the draw-averaged log-likelihood, obtained by central differences of
    the analytic total score with step 1e-5 * max(1, |theta|).
    """
    n_draws = draws.n_draws
    diffs = pair_differences(data, draws)
    theta_vec = theta1.as_vector()
    p = theta_vec.size

    _, outer = _score_sums_and_outer(data, diffs, theta1, want_outer=True)
    J = (outer + np.triu(outer, 1).T) / n_draws  # symmetrize the upper-triangle fill

    H = np.zeros((p, p))
    for l in range(p):
        h = FD_STEP * max(1.0, abs(theta_vec[l]))
        plus = theta_vec.copy()
        plus[l] += h
        minus = theta_vec.copy()
        minus[l] -= h
        s_plus, _ = _score_sums_and_outer(
            data, diffs, DataLayerParams.from_vector(plus, theta1.sources), want_outer=False
        )
        s_minus, _ = _score_sums_and_outer(
            data, diffs, DataLayerParams.from_vector(minus, theta1.sources), want_outer=False
        )
        H[:, l] = (s_plus - s_minus) / (2.0 * h * n_draws)
    H = 0.5 * (H + H.T)

    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(f"singular Hessian in sandwich covariance (cond={cond:.3e})")
    h_inv = np.linalg.inv(H)
    cov = h_inv @ J @ h_inv
    cov = 0.5 * (cov + cov.T)
    return InfoMatrices(J=J, H=H, sandwich_cov=cov)


def process_suffstats(draws: LatentFieldDraws):
    """Draw mean and centred second-moment matrix.

    Centring before forming the outer product avoids the catastrophic
    cancellation a raw second-moment formulation would suffer (the
    finite-difference Hessians downstream amplify any such noise by 1/h^2).
    """
    mu_bar = draws.draws.mean(axis=0)
    centred = draws.draws - mu_bar
    s_centred = centred.T @ centred / draws.n_draws
    return mu_bar, s_centred


def process_average_loglik(
    sites: list[Location],
    design: np.ndarray,
    mu_bar: np.ndarray,
    s_centred: np.ndarray,
    beta: np.ndarray,
    cov_spec: CovarianceSpec,
) -> float:
    """(1/N) sum_i log N(mu_i; X beta, Sigma), via sufficient statistics.

    The draw average depends on the draws only through their mean and
    centred covariance, so each evaluation is O(D^3) regardless of N:
    (1/N) sum_i r_i' S^{-1} r_i = tr(S^{-1} S_c) + r' S^{-1} r, r = mu_bar - X beta.
    """
    d = len(sites)
    factor = CholeskyFactor(covariance_matrix(cov_spec, sites))
    resid = mu_bar - design @ beta
    quad = float(np.trace(factor.solve(s_centred))) + factor.quad_form(resid)
    return -0.5 * (d * math.log(2.0 * math.pi) + factor.log_det() + quad)


def fisher_covariance_theta2(
    draws: LatentFieldDraws,
    sites: list[Location],
    theta2: ProcessLayerParams,
    include_covariance: bool = True,
) -> np.ndarray:
    """Observed-Fisher covariance of (beta, sigma_mu, phi, delta); tau fixed.

    Inverse of the negative numerical Hessian of the draw-averaged process
    log-likelihood, parameterised with sigma_mu (not sigma_mu^2) to match
    the reported table layout.  With ``include_covariance=False`` the
    covariance parameters are held at their estimates and the result is the
    coefficient block alone, which reduces to the GLS form (X' Sigma^-1 X)^-1.

    A covariance coordinate whose estimate sits numerically on a boundary
    of its feasible region (typically delta at 2) is held fixed instead of
    differenced; its row and column come back as zero, meaning "no
    uncertainty reported", and the rest is the covariance of the estimator
    constrained to that boundary.
    """
    design = location_design(sites, theta2.sources)
    mu_bar, s_centred = process_suffstats(draws)
    tau = theta2.cov.tau
    beta_hat = theta2.beta
    sigma_mu = math.sqrt(theta2.cov.sigma2)
    if sigma_mu <= 0.0:
        raise InputError("Fisher covariance undefined for a degenerate (sigma2=0) field")
    if include_covariance:
        center = np.concatenate([beta_hat, [sigma_mu, theta2.cov.phi, theta2.cov.delta]])
    else:
        center = beta_hat.copy()
    p = center.size

    def objective(vec: np.ndarray) -> float:
        if include_covariance:
            beta = vec[:-3]
            s_mu, phi, delta = vec[-3], vec[-2], vec[-1]
        else:
            beta = vec
            s_mu, phi, delta = sigma_mu, theta2.cov.phi, theta2.cov.delta
        if s_mu <= 0.0 or phi <= 0.0 or not (0.0 < delta <= 2.0):
            return -np.inf
        spec = CovarianceSpec(s_mu**2, tau, phi, delta)
        return process_average_loglik(sites, design, mu_bar, s_centred, beta, spec)

    # the likelihood is exactly quadratic in the coefficients, so a larger
    # step there has zero truncation cost and much less roundoff
    steps = FD_STEP * np.maximum(1.0, np.abs(center))
    steps[: beta_hat.size] = 5e-3 * np.maximum(1.0, np.abs(beta_hat))
    active = np.ones(p, dtype=bool)
    if include_covariance:
        # keep the two-step probes strictly inside the feasible region; an
        # estimate pinned (numerically) on a boundary, e.g. delta at 2, has
        # no usable curvature there, so that coordinate is held fixed and
        # its row/column reported as zero: the constrained covariance
        distances = np.array(
            [sigma_mu, theta2.cov.phi, min(theta2.cov.delta, 2.0 - theta2.cov.delta)]
        )
        limited = np.minimum(steps[-3:], 0.25 * distances)
        active[-3:] = limited >= 1e-6
        steps[-3:] = np.where(active[-3:], limited, 1.0)
    idx = np.flatnonzero(active)
    hess = np.zeros((idx.size, idx.size))
    f0 = objective(center)
    if not np.isfinite(f0):
        raise NumericalError("process log-likelihood non-finite at the estimate")
    for a_out, a in enumerate(idx):
        for b_out, b in enumerate(idx[a_out:], start=a_out):
            ea = np.zeros(p)
            eb = np.zeros(p)
            ea[a] = steps[a]
            eb[idx[b_out]] = steps[idx[b_out]]
            if a == idx[b_out]:
                f_pp = objective(center + 2 * ea)
                f_mm = objective(center - 2 * ea)
                val = (f_pp - 2 * f0 + f_mm) / (4.0 * steps[a] ** 2)
            else:
                f_pp = objective(center + ea + eb)
                f_pm = objective(center + ea - eb)
                f_mp = objective(center - ea + eb)
                f_mm = objective(center - ea - eb)
                val = (f_pp - f_pm - f_mp + f_mm) / (4.0 * steps[a] * steps[idx[b_out]])
            hess[a_out, b_out] = hess[b_out, a_out] = val
    neg = -hess
    cond = np.linalg.cond(neg)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalError(f"singular process-layer Hessian (cond={cond:.3e})")
    block = np.linalg.inv(neg)
    cov = np.zeros((p, p))
    cov[np.ix_(idx, idx)] = 0.5 * (block + block.T)
    return cov
