"""Metropolis-within-Gibbs sampler for the conditional latent field [mu | x].

One-site-at-a-time Gaussian random-walk updates against a target combining
each site's GEV likelihood with the conditional Gaussian implied by the
latent covariance.  The Gaussian part works off the precision matrix: after
an O(D^3) setup each site update is O(D) (and the per-site data likelihood
is cached, so a sweep costs one GEV evaluation per site).

Proposal scales adapt toward 0.44 acceptance during burn-in only; the
post-burn-in kernel is frozen so recorded draws come from a fixed Markov
chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from gevfield.exceptions import FitError, InputError
from gevfield.gev import gev_loglik_total
from gevfield.gp import LatentFieldDraws
from gevfield.linalg import CholeskyFactor
from gevfield.model import DataLayerParams, JointDataset, ProcessLayerParams
from gevfield.spatial import covariance_matrix


@dataclass(frozen=True)
class SamplerConfig:
    """Chain-length and proposal settings for the latent-field sampler."""

    n_draws: int
    burn_in: int = 1000
    thin: int = 1
    proposal_scale: float | np.ndarray = 1.0
    adapt: bool = True
    target_accept: float = 0.44

    def __post_init__(self):
        if self.n_draws < 1:
            raise InputError(f"n_draws must be >= 1, got {self.n_draws}")
        if self.burn_in < 0:
            raise InputError(f"burn_in must be >= 0, got {self.burn_in}")
        if self.thin < 1:
            raise InputError(f"thin must be >= 1, got {self.thin}")
        if not (0.0 < self.target_accept < 1.0):
            raise InputError("target_accept must lie in (0, 1)")
        if np.any(np.asarray(self.proposal_scale) <= 0.0):
            raise InputError("proposal scales must be positive")

    def scales_for(self, n_sites: int) -> np.ndarray:
        scales = np.broadcast_to(np.asarray(self.proposal_scale, float), (n_sites,))
        return scales.copy()


def adapt_proposals(accept_rates: np.ndarray, cfg: SamplerConfig, step: float = 0.1) -> SamplerConfig:
    """Robbins-Monro rescaling of proposal scales toward the target rate.

    Multiplicative update exp{step * (rate - target)} per site: at the
    target the scale is a fixed point; sustained full acceptance grows it.
    """
    rates = np.asarray(accept_rates, dtype=float)
    scales = cfg.scales_for(rates.shape[0])
    new_scales = scales * np.exp(step * (rates - cfg.target_accept))
    return replace(cfg, proposal_scale=new_scales)


def metropolis_gibbs(
    site_loglik: Callable[[int, float], float] | None,
    m: np.ndarray,
    cov: np.ndarray,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    init: np.ndarray | None = None,
) -> tuple[np.ndarray, dict]:
    """Core sweep engine over an arbitrary per-site data log-likelihood.

    Args:
        site_loglik: callable (site index, value) -> log-likelihood term, or
            None for a flat likelihood (prior-only chain).
        m: prior mean vector (D,).
        cov: prior covariance (D, D).
        cfg: chain configuration.
        rng: random generator, advanced in place.
        init: optional starting field; defaults to m.

    Returns:
        (draws (n_draws, D), meta dict with acceptance/scales/settings).
    """
    d = m.shape[0]
    precision = CholeskyFactor(cov).inverse()
    q_diag = np.diag(precision).copy()

    state = np.array(m if init is None else init, dtype=float)
    resid = precision @ (state - m)

    if site_loglik is None:
        cur_ll = np.zeros(d)
    else:
        cur_ll = np.array([site_loglik(j, state[j]) for j in range(d)])
        if not np.all(np.isfinite(cur_ll)):
            bad = int(np.argmin(np.isfinite(cur_ll)))
            raise FitError(
                f"non-finite data likelihood at initialization (site index {bad}): "
                "parameters put observations off the GEV support"
            )

    scales = cfg.scales_for(d)
    draws = np.empty((cfg.n_draws, d))
    accepted_post = np.zeros(d)
    sweeps_post = 0

    total_burn = cfg.burn_in
    total_sweeps = total_burn + cfg.n_draws * cfg.thin
    log_scales = np.log(scales)

    for sweep in range(total_sweeps):
        in_burn = sweep < total_burn
        if in_burn and cfg.adapt:
            rm_step = min(0.2, 2.0 / math.sqrt(sweep + 1))
        innovations = rng.standard_normal(d)
        uniforms = rng.random(d)
        for j in range(d):
            x_old = state[j]
            x_new = x_old + scales[j] * innovations[j]
            if site_loglik is None:
                new_ll = 0.0
            else:
                new_ll = site_loglik(j, x_new)
            if new_ll == -np.inf:
                accept = False
            else:
                cond_mean = x_old - resid[j] / q_diag[j]
                d_old = x_old - cond_mean
                d_new = x_new - cond_mean
                log_ratio = (new_ll - cur_ll[j]) - 0.5 * q_diag[j] * (
                    d_new * d_new - d_old * d_old
                )
                accept = math.log(uniforms[j]) < log_ratio
            if accept:
                resid += precision[:, j] * (x_new - x_old)
                state[j] = x_new
                cur_ll[j] = new_ll
                if not in_burn:
                    accepted_post[j] += 1
            if in_burn and cfg.adapt:
                log_scales[j] += rm_step * ((1.0 if accept else 0.0) - cfg.target_accept)
        if in_burn and cfg.adapt:
            scales = np.exp(log_scales)
        if not in_burn:
            sweeps_post += 1
            k = sweep - total_burn
            if (k + 1) % cfg.thin == 0:
                draws[(k + 1) // cfg.thin - 1] = state

    meta = {
        "acceptance": accepted_post / max(sweeps_post, 1),
        "proposal_scales": scales,
        "burn_in": cfg.burn_in,
        "thin": cfg.thin,
        "n_draws": cfg.n_draws,
    }
    return draws, meta


def sample_latent_field(
    data: JointDataset,
    theta1: DataLayerParams,
    theta2: ProcessLayerParams,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    init: np.ndarray | None = None,
) -> LatentFieldDraws:
    """Draws from the latent location field given observed maxima.

    The degenerate prior (sigma2 = 0, tau = 0) pins every draw at the mean
    surface m(s) exactly.  ``init`` warm-starts the chain (e.g. from the
    previous EM iteration's last state); the default start is m(s).
    """
    sites = data.sites
    m = theta2.mean_at(sites)
    if theta2.cov.sigma2 == 0.0 and theta2.cov.tau == 0.0:
        draws = np.tile(m, (cfg.n_draws, 1))
        meta = {"acceptance": np.zeros(len(sites)), "degenerate": True}
        return LatentFieldDraws(draws, sites, meta)

    values = data.values_by_site()
    psis = np.array([theta1.psi_at(s) for s in sites])
    xis = np.array([theta1.xi_at(s) for s in sites])

    def site_loglik(j: int, mu: float) -> float:
        return gev_loglik_total(values[j], mu, psis[j], xis[j])

    cov = covariance_matrix(theta2.cov, sites)
    draws, meta = metropolis_gibbs(site_loglik, m, cov, cfg, rng, init=init)
    return LatentFieldDraws(draws, sites, meta)
