"""Generalised extreme value distribution: densities, quantiles, moments, sampling.

Parameterisation: location ``mu``, scale ``psi > 0`` and shape ``xi``; the
distribution function is ``exp(-(1 + xi*(z - mu)/psi)**(-1/xi))`` on
``1 + xi*(z - mu)/psi > 0`` with the Gumbel form ``exp(-exp(-(z - mu)/psi))``
at ``xi = 0``.

Everything funnels through the reduced variable ``w = log1p(xi*u)/xi`` with
``u = (z - mu)/psi``: the CDF is ``exp(-exp(-w))`` and the log-density is
``-log(psi) - (1 + xi)*w - exp(-w)``.  Near ``xi = 0`` the code switches to
the Gumbel branch below ``XI_SWITCH`` and to a power-series evaluation of
``w`` in a transition band, which keeps all functions continuous in ``xi``
to well below any tolerance used elsewhere in the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gamma as gamma_fn

from gevfield.exceptions import InputError

# Below XI_SWITCH the Gumbel branch is used outright; between XI_SWITCH and
# XI_SERIES the reduced variable is evaluated by series where that is the
# more accurate route.
XI_SWITCH = 1e-6
XI_SERIES = 1e-3

_EULER_GAMMA = float(np.euler_gamma)
_ZETA2 = math.pi**2 / 6.0
_ZETA3 = 1.2020569031595943
_ZETA4 = math.pi**4 / 90.0
_ZETA5 = 1.036927755143370


@dataclass(frozen=True)
class GevParams:
    """GEV parameter triple (location, scale, shape).

    Attributes:
        mu: location, in data units (mm for rainfall).
        psi: scale, same units, strictly positive.
        xi: shape, dimensionless.
    """

    mu: float
    psi: float
    xi: float

    def __post_init__(self):
        if not (self.psi > 0.0) or not np.isfinite(self.psi):
            raise InputError(f"GEV scale must be positive and finite, got psi={self.psi}")
        if not (np.isfinite(self.mu) and np.isfinite(self.xi)):
            raise InputError(f"GEV parameters must be finite, got mu={self.mu}, xi={self.xi}")

    def support(self, z) -> bool | np.ndarray:
        """Whether ``z`` lies in the distribution's support."""
        z = np.asarray(z, dtype=float)
        if abs(self.xi) < XI_SWITCH:
            out = np.ones(z.shape, dtype=bool)
        else:
            out = 1.0 + self.xi * (z - self.mu) / self.psi > 0.0
        return bool(out) if out.ndim == 0 else out

    def support_bounds(self) -> tuple[float, float]:
        """(lower, upper) endpoints of the support; infinite where unbounded."""
        if abs(self.xi) < XI_SWITCH:
            return (-np.inf, np.inf)
        endpoint = self.mu - self.psi / self.xi
        if self.xi > 0:
            return (endpoint, np.inf)
        return (-np.inf, endpoint)


@dataclass(frozen=True)
class ReturnLevelSpec:
    """A return period in years and the probability/transform it maps to.

    The p-year return level is the quantile at non-exceedance probability
    ``1 - 1/p``, so ``y_p = -log(1 - 1/p)`` is the Gumbel-scale transform
    entering the closed-form quantile.
    """

    p_years: float

    def __post_init__(self):
        if not (self.p_years > 1.0):
            raise InputError(f"return period must exceed 1 year, got {self.p_years}")

    @property
    def prob(self) -> float:
        return 1.0 - 1.0 / self.p_years

    @property
    def y_p(self) -> float:
        return -math.log1p(-1.0 / self.p_years)


def _reduced_w(u: np.ndarray, xi: float) -> np.ndarray:
    """``log1p(xi*u)/xi`` elementwise, assuming ``1 + xi*u > 0`` and ``xi != 0``.

    In the transition band a truncated alternating series in ``a = xi*u`` is
    used when ``|a|`` is small; elsewhere ``log1p`` is accurate directly.
    """
    a = xi * u
    if abs(xi) < XI_SERIES:
        small = np.abs(a) < 0.01
        if np.any(small):
            a_s = np.where(small, a, 0.0)
            # u * (1 - a/2 + a^2/3 - ... + a^6/7); next term < 1e-16 relative
            series = 1.0 - a_s / 2.0
            power = a_s * a_s
            for k in (3.0, 4.0, 5.0, 6.0, 7.0):
                series = series + power / k if k % 2 else series - power / k
                power = power * a_s
            series_w = u * series
            with np.errstate(divide="ignore", invalid="ignore"):
                direct = np.log1p(a) / xi
            return np.where(small, series_w, direct)
    return np.log1p(a) / xi


def _w_and_mask(params: GevParams, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduced variable and on-support mask for an array of observations."""
    u = (z - params.mu) / params.psi
    if abs(params.xi) < XI_SWITCH:
        return u, np.ones(u.shape, dtype=bool)
    on = 1.0 + params.xi * u > 0.0
    w = np.where(on, _reduced_w(np.where(on, u, 0.0), params.xi), 0.0)
    return w, on


def gev_cdf(params: GevParams, z) -> float | np.ndarray:
    """Distribution function; 0/1 beyond the support endpoints.

    Total function: finite for every real ``z``.
    """
    z_arr = np.asarray(z, dtype=float)
    w, on = _w_and_mask(params, z_arr)
    # off support: below a lower endpoint (xi > 0) the CDF is 0, above an
    # upper endpoint (xi < 0) it is 1; encode via w = -inf / +inf.
    off_value = -np.inf if params.xi > 0 else np.inf
    w = np.where(on, w, off_value)
    with np.errstate(over="ignore"):
        out = np.exp(-np.exp(-w))
    return float(out) if out.ndim == 0 else out


def gev_log_density(params: GevParams, z) -> float | np.ndarray:
    """Log-density; ``-inf`` off the support (never raises)."""
    z_arr = np.asarray(z, dtype=float)
    w, on = _w_and_mask(params, z_arr)
    with np.errstate(over="ignore"):
        val = -math.log(params.psi) - (1.0 + params.xi) * w - np.exp(-w)
    out = np.where(on, val, -np.inf)
    return float(out) if out.ndim == 0 else out


def gev_loglik_total(values: np.ndarray, mu: float, psi: float, xi: float) -> float:
    """Sum of GEV log-densities of ``values`` for scalar parameters.

    Fast path used by the sampler and the EM objective; returns ``-inf`` as
    soon as any observation falls off the support.
    """
    u = (values - mu) / psi
    if abs(xi) < XI_SWITCH:
        w = u
    else:
        a = xi * u
        if np.min(a) <= -1.0:
            return -np.inf
        w = _reduced_w(u, xi)
    return float(-values.size * math.log(psi) - (1.0 + xi) * np.sum(w) - np.sum(np.exp(-w)))


def gev_quantile(params: GevParams, prob) -> float | np.ndarray:
    """Quantile function (inverse CDF).

    Args:
        params: GEV parameters.
        prob: probability strictly inside (0, 1); scalar or array.

    Raises:
        InputError: for probabilities outside (0, 1).
    """
    p = np.asarray(prob, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise InputError("quantile probability must lie strictly in (0, 1)")
    log_y = np.log(-np.log(p))
    if abs(params.xi) < XI_SWITCH:
        out = params.mu - params.psi * log_y
    else:
        out = params.mu + params.psi / params.xi * np.expm1(-params.xi * log_y)
    return float(out) if out.ndim == 0 else out


def return_level(params: GevParams, p_years: float) -> float:
    """Level exceeded on average once in ``p_years`` blocks.

    Equals the GEV quantile at probability ``1 - 1/p_years``.
    """
    spec = ReturnLevelSpec(p_years)
    return float(gev_quantile(params, spec.prob))


def gev_variance(params: GevParams) -> float | None:
    """Variance of the distribution, or ``None`` when it does not exist (xi >= 1/2).

    ``psi^2 * (Gamma(1-2 xi) - Gamma(1-xi)^2) / xi^2`` for nonzero shape and
    ``psi^2 * pi^2 / 6`` in the Gumbel limit.  A short series bridges the two
    branches where the direct formula would cancel catastrophically.
    """
    xi = params.xi
    if xi >= 0.5:
        return None
    psi2 = params.psi**2
    if abs(xi) < XI_SWITCH:
        return psi2 * _ZETA2
    if abs(xi) < XI_SERIES:
        bracket = (
            _ZETA2
            + 2.0 * _ZETA3 * xi
            + (3.5 * _ZETA4 + 1.5 * _ZETA2**2) * xi * xi
            + (6.0 * _ZETA5 + 14.0 / 3.0 * _ZETA2 * _ZETA3) * xi**3
        )
        return psi2 * math.exp(2.0 * _EULER_GAMMA * xi) * bracket
    g1 = gamma_fn(1.0 - xi)
    g2 = gamma_fn(1.0 - 2.0 * xi)
    return psi2 * (g2 - g1 * g1) / (xi * xi)


def gev_sample(params: GevParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sample of size ``n``; mutates only the caller's generator."""
    if n < 1:
        raise InputError(f"sample size must be at least 1, got {n}")
    return np.asarray(gev_quantile(params, rng.random(n)))
