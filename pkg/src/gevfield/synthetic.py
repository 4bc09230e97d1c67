"""Dataset simulation from known parameters.

``simulate_world`` follows the model's own generative story: one latent
location field from the Gaussian process, then conditionally independent
GEV maxima around it.  ``simulate_misspecified`` keeps the margins exactly
GEV but couples the within-year residuals through a Gaussian copula with
an exponential correlation over distance, violating the conditional
independence assumption on purpose; it exists as test scaffolding for the
robust-variance machinery, not as part of the model.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from gevfield.exceptions import InputError
from gevfield.gev import GevParams, gev_quantile, gev_sample
from gevfield.gp import gp_simulate
from gevfield.linalg import CholeskyFactor
from gevfield.model import DataLayerParams, JointDataset, ProcessLayerParams, SiteRecord
from gevfield.spatial import Location, SourceTag, pairwise_distances

_LETTER = {SourceTag.FIELD: "F", SourceTag.SIMULATOR: "M"}


def _site_ids(sites: list[Location]) -> list[str]:
    return [f"{_LETTER[s.source_tag]}{k:03d}" for k, s in enumerate(sites)]


def _assemble(sites, values_by_site, start_year, origin) -> JointDataset:
    t = values_by_site[0].shape[0]
    years = tuple(range(start_year, start_year + t))
    records = tuple(
        SiteRecord(sid, site, years, tuple(float(v) for v in vals))
        for sid, site, vals in zip(_site_ids(sites), sites, values_by_site)
    )
    return JointDataset(records, origin)


def simulate_world(
    theta1: DataLayerParams,
    theta2: ProcessLayerParams,
    sites: list[Location],
    t: int,
    rng: np.random.Generator,
    start_year: int = 1950,
    origin: tuple[float, float] = (0.0, 0.0),
) -> JointDataset:
    """One latent field, then t independent maxima per site around it."""
    if t < 1:
        raise InputError(f"need at least one year, got {t}")
    mus = gp_simulate(theta2.mean_structure(), theta2.cov, sites, rng)
    values = [
        gev_sample(GevParams(mus[j], theta1.psi_at(s), theta1.xi_at(s)), t, rng)
        for j, s in enumerate(sites)
    ]
    return _assemble(sites, values, start_year, origin)


def simulate_misspecified(
    theta1: DataLayerParams,
    theta2: ProcessLayerParams,
    sites: list[Location],
    t: int,
    residual_corr_range: float,
    rng: np.random.Generator,
    start_year: int = 1950,
    origin: tuple[float, float] = (0.0, 0.0),
) -> JointDataset:
    """As simulate_world, but residuals are spatially dependent within a year.

    Each year's uniforms come from a Gaussian copula with correlation
    exp(-d / residual_corr_range); the inverse-CDF step then preserves the
    per-site GEV margins exactly while the maxima co-vary beyond what the
    latent field explains.
    """
    if not residual_corr_range > 0.0:
        raise InputError(
            f"residual_corr_range must be positive, got {residual_corr_range}"
        )
    if t < 1:
        raise InputError(f"need at least one year, got {t}")
    mus = gp_simulate(theta2.mean_structure(), theta2.cov, sites, rng)

    corr = np.exp(-pairwise_distances(sites) / residual_corr_range)
    lower = CholeskyFactor(corr).lower
    z = lower @ rng.standard_normal((len(sites), t))  # D x T, correlated rows
    # keep the copula layer strictly inside (0, 1): ndtr underflows to 0/1
    # around |z| ~ 8.3 and the quantile transform rejects the endpoints
    uniforms = np.clip(ndtr(z), 1e-300, 1.0 - 1e-16)

    values = [
        gev_quantile(GevParams(mus[j], theta1.psi_at(s), theta1.xi_at(s)), uniforms[j])
        for j, s in enumerate(sites)
    ]
    return _assemble(sites, [np.asarray(v) for v in values], start_year, origin)
