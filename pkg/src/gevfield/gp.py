"""Latent Gaussian process layer: density, simulation and kriging.

The latent rainfall-location surface is Gaussian with mean ``m(s)`` from a
covariate design and powered-exponential covariance.  Kriging uses standard
multivariate-normal conditioning with the "+" mean update; predictions at
unobserved locations involve only the smooth (nugget-free) covariance, so a
target colocated with an observed site keeps exactly the nugget discrepancy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from gevfield.exceptions import InputError, NumericalError
from gevfield.linalg import CholeskyFactor, mvn_log_density, mvn_sample
from gevfield.spatial import (
    CovarianceSpec,
    Location,
    covariance_matrix,
    cross_distances,
    smooth_correlation,
)


@dataclass(frozen=True, eq=False)
class MeanStructure:
    """Latent-surface mean: coefficients against a covariate row function."""

    coefficients: np.ndarray
    design: Callable[[Location], np.ndarray]

    def mean_vector(self, sites: list[Location]) -> np.ndarray:
        rows = np.vstack([self.design(s) for s in sites])
        return rows @ np.asarray(self.coefficients, dtype=float)

    def mean_at(self, site: Location) -> float:
        return float(np.asarray(self.design(site)) @ self.coefficients)


@dataclass(frozen=True)
class KrigingResult:
    """Conditional mean (mm) and variance (mm^2) at a prediction target."""

    cond_mean: float
    cond_var: float

    def __post_init__(self):
        if self.cond_var < 0.0:
            raise InputError(f"negative kriging variance {self.cond_var}")


@dataclass(eq=False)
class LatentFieldDraws:
    """N complete latent fields over a fixed site list (N x D matrix)."""

    draws: np.ndarray
    sites: list[Location]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        if self.draws.shape[0] < 1 or self.draws.shape[1] != len(self.sites):
            raise InputError(
                f"draws shape {self.draws.shape} incompatible with {len(self.sites)} sites"
            )

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def n_sites(self) -> int:
        return self.draws.shape[1]


def gp_log_density(
    mean: MeanStructure,
    spec: CovarianceSpec,
    fieldvec: np.ndarray,
    sites: list[Location],
) -> float:
    """Multivariate-normal log-density of a latent field realisation."""
    fieldvec = np.asarray(fieldvec, dtype=float)
    if fieldvec.shape != (len(sites),):
        raise InputError(f"field shape {fieldvec.shape} does not match {len(sites)} sites")
    factor = CholeskyFactor(covariance_matrix(spec, sites))
    return mvn_log_density(fieldvec, mean.mean_vector(sites), factor)


def gp_simulate(
    mean: MeanStructure,
    spec: CovarianceSpec,
    sites: list[Location],
    rng: np.random.Generator,
) -> np.ndarray:
    """One draw of the latent field; degenerate spec returns m(s) exactly."""
    m = mean.mean_vector(sites)
    if spec.sigma2 == 0.0 and spec.tau == 0.0:
        return m
    factor = CholeskyFactor(covariance_matrix(spec, sites))
    return mvn_sample(m, factor, rng)


def krige_factor(spec: CovarianceSpec, sites: list[Location]) -> CholeskyFactor:
    """Factorized observed-site covariance, reusable across many targets."""
    return CholeskyFactor(covariance_matrix(spec, sites))


def krige_many(
    mean: MeanStructure,
    spec: CovarianceSpec,
    observed_field: np.ndarray,
    sites: list[Location],
    targets: list[Location],
    factor: CholeskyFactor | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Conditional (means, variances) at many targets sharing one factorization.

    cross-covariance k(s*, s) = sigma2 * exp{-(d/phi)^delta} carries no
    nugget: the prediction concerns the smooth field at s*, and the prior
    variance there is sigma2.
    """
    observed_field = np.asarray(observed_field, dtype=float)
    if observed_field.shape != (len(sites),):
        raise InputError("observed field length must match site count")
    if factor is None:
        factor = krige_factor(spec, sites)
    cross = spec.sigma2 * smooth_correlation(spec, cross_distances(targets, sites))
    resid = observed_field - mean.mean_vector(sites)
    weights = factor.solve(cross.T)  # D x n_targets
    means = np.array([mean.mean_at(t) for t in targets]) + cross @ factor.solve(resid)
    variances = spec.sigma2 - np.einsum("ij,ji->i", cross, weights)
    # exact interpolation can land epsilon below zero; anything worse is a bug
    floor = -1e-8 * max(spec.sigma2, 1e-300)
    if np.any(variances < floor):
        raise NumericalError(f"kriging variance {variances.min():.3e} below roundoff floor")
    return means, np.maximum(variances, 0.0)


def krige(
    mean: MeanStructure,
    spec: CovarianceSpec,
    observed_field: np.ndarray,
    sites: list[Location],
    target: Location,
    factor: CholeskyFactor | None = None,
) -> KrigingResult:
    """Conditional distribution of the smooth field at one target location."""
    means, variances = krige_many(mean, spec, observed_field, sites, [target], factor)
    return KrigingResult(float(means[0]), float(variances[0]))


def krige_draws(
    mean: MeanStructure,
    spec: CovarianceSpec,
    draws: np.ndarray,
    sites: list[Location],
    targets: list[Location],
    factor: CholeskyFactor | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Conditional means of every draw at every target, with shared variances.

    Vectorized companion to ``krige_many`` for an N x D matrix of latent
    fields over the same sites: the means come back as an (N, n_targets)
    matrix while the variances, which do not depend on the conditioning
    values, have shape (n_targets,).
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if draws.shape[1] != len(sites):
        raise InputError(
            f"draw width {draws.shape[1]} must match site count {len(sites)}"
        )
    if factor is None:
        factor = krige_factor(spec, sites)
    cross = spec.sigma2 * smooth_correlation(spec, cross_distances(targets, sites))
    weights = factor.solve(cross.T)  # D x n_targets
    variances = spec.sigma2 - np.einsum("ij,ji->i", cross, weights)
    floor = -1e-8 * max(spec.sigma2, 1e-300)
    if np.any(variances < floor):
        raise NumericalError(f"kriging variance {variances.min():.3e} below roundoff floor")
    prior = np.array([mean.mean_at(t) for t in targets])
    means = prior[None, :] + (draws - mean.mean_vector(sites)[None, :]) @ weights
    return means, np.maximum(variances, 0.0)
