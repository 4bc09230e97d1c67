"""Model checks: quantile plots, spatial-correlation comparison, crossvalidation.

Quantile plots compare sorted observations to draw-averaged GEV quantiles,
with pointwise confidence bounds built from order statistics of synthetic
samples.  The correlation check compares binned empirical inter-site
correlations of the maxima to the model-implied curve, whose denominator
carries a factor k >= 0 scaling the non-latent (GEV) share of the variance;
k = 0 reduces to the latent-field correlation alone.  Crossvalidation
refits without held-out sites and quantile-plots their observations against
kriged predictive mixtures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gevfield.exceptions import InputError, NumericalError
from gevfield.gev import GevParams, gev_quantile, gev_variance
from gevfield.gp import LatentFieldDraws, krige_factor
from gevfield.model import (
    DataLayerParams,
    DownscalingFunction,
    JointDataset,
    apply_downscaling,
)
from gevfield.spatial import (
    Location,
    SourceTag,
    covariance_matrix,
    cross_distances,
    smooth_correlation,
)


@dataclass(frozen=True, eq=False)
class QuantilePlotData:
    """Observed-versus-expected quantile pairs with pointwise bounds."""

    site_id: str
    observed: np.ndarray
    expected: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    alpha: float

    def __post_init__(self):
        n = self.observed.shape[0]
        if not (self.expected.shape[0] == self.lower.shape[0] == self.upper.shape[0] == n):
            raise InputError("quantile plot vectors must share one length")
        if np.any(np.diff(self.observed) < 0.0):
            raise InputError("observed values must be sorted ascending")

    @property
    def pairs(self) -> np.ndarray:
        return np.column_stack([self.observed, self.expected])

    @property
    def n_points(self) -> int:
        return self.observed.shape[0]

    def fraction_within_bounds(self) -> float:
        inside = (self.observed >= self.lower) & (self.observed <= self.upper)
        return float(np.mean(inside))


@dataclass(frozen=True, eq=False)
class CorrelationDiagnostic:
    """Binned empirical vs model-implied correlations of annual maxima."""

    bins: tuple[tuple[float, float, int], ...]
    k: float
    model_corr: np.ndarray
    empirical_corr: np.ndarray
    excluded_pairs: int

    def __post_init__(self):
        model = [b[0] for b in self.bins]
        if any(not 0.0 <= m <= 1.0 for m in model):
            raise InputError("model correlations must lie in [0, 1]")
        if any(b1 > b2 for b1, b2 in zip(model, model[1:])):
            raise InputError("bins must be ordered by model correlation")


def _site_index(draws: LatentFieldDraws, site: Location) -> int:
    for j, s in enumerate(draws.sites):
        if s == site:
            return j
    raise InputError("site is not present in the latent draws")


def _maybe_downscale(values: np.ndarray, site: Location, g) -> np.ndarray:
    if g is not None and site.source_tag is SourceTag.SIMULATOR:
        return np.asarray(g(values), dtype=float)
    return np.asarray(values, dtype=float)


def _theta1_replicates(theta1, parameter_info, n_g, rng):
    """Per-replicate data-layer parameters; fixed unless an info matrix
    requests sampling parameter uncertainty into the bounds."""
    if parameter_info is None:
        return [theta1] * n_g
    vec = theta1.as_vector()
    samples = rng.multivariate_normal(vec, parameter_info.sandwich_cov, size=n_g)
    return [DataLayerParams.from_vector(v, theta1.sources) for v in samples]


def quantile_bounds(
    site: Location,
    n: int,
    draws: LatentFieldDraws,
    theta1: DataLayerParams,
    n_g: int = 1000,
    alpha: float = 0.05,
    rng: np.random.Generator | None = None,
    parameter_info=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise bounds for each order statistic of a size-n sample.

    Draws ``n_g`` synthetic samples of size n from the fitted predictive
    mixture (cycling the latent draws), sorts each, and takes the
    floor(n_g * alpha/2)-th and floor(n_g * (1 - alpha/2))-th order
    statistics rank by rank.  Passing ``parameter_info`` additionally
    samples the data-layer parameters from their sandwich normal per
    replicate (off by default; the widening is usually minor).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if n < 2:
        raise InputError(f"need at least two observations, got {n}")
    if n_g < 100:
        raise InputError(f"n_g must be at least 100, got {n_g}")
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")
    lo_rank = int(np.floor(n_g * alpha / 2.0))
    hi_rank = int(np.floor(n_g * (1.0 - alpha / 2.0)))
    if lo_rank < 1:
        raise InputError(
            f"rank underflow: n_g * alpha / 2 = {n_g * alpha / 2.0:.3g} < 1; "
            "increase n_g or alpha"
        )

    j = _site_index(draws, site)
    mus = draws.draws[np.arange(n_g) % draws.n_draws, j]
    thetas = _theta1_replicates(theta1, parameter_info, n_g, rng)

    order_stats = np.empty((n_g, n))
    uniforms = rng.random((n_g, n))
    for r in range(n_g):
        params = GevParams(mus[r], thetas[r].psi_at(site), thetas[r].xi_at(site))
        order_stats[r] = np.sort(gev_quantile(params, uniforms[r]))
    order_stats.sort(axis=0)
    return order_stats[lo_rank - 1].copy(), order_stats[hi_rank - 1].copy()


def quantile_plot(
    site: Location,
    observed: np.ndarray,
    draws: LatentFieldDraws,
    theta1: DataLayerParams,
    site_id: str = "",
    n_g: int = 1000,
    alpha: float = 0.05,
    rng: np.random.Generator | None = None,
    g: DownscalingFunction | None = None,
    parameter_info=None,
) -> QuantilePlotData:
    """Sorted observations against draw-averaged model quantiles.

    expected[k] averages the GEV quantile at probability (k+1)/(n+1) over
    the latent draws' location values; simulator-site observations pass
    through ``g`` first when one is supplied.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    observed = _maybe_downscale(observed, site, g)
    n = observed.shape[0]
    if n < 2:
        raise InputError(f"need at least two observations, got {n}")

    j = _site_index(draws, site)
    psi, xi = theta1.psi_at(site), theta1.xi_at(site)
    probs = np.arange(1, n + 1) / (n + 1.0)
    # the quantile is affine in the location, so averaging over draws only
    # shifts the zero-location quantile by the mean latent value
    base = np.asarray(gev_quantile(GevParams(0.0, psi, xi), probs))
    expected = float(np.mean(draws.draws[:, j])) + base

    lower, upper = quantile_bounds(
        site, n, draws, theta1, n_g=n_g, alpha=alpha, rng=rng, parameter_info=parameter_info
    )
    return QuantilePlotData(site_id, np.sort(observed), expected, lower, upper, alpha)


def _gev_noise_variance(theta1: DataLayerParams, site: Location) -> float:
    var = gev_variance(GevParams(0.0, theta1.psi_at(site), theta1.xi_at(site)))
    if var is None:
        raise NumericalError(
            "GEV variance does not exist at shape >= 1/2; "
            "the correlation diagnostic is undefined"
        )
    return var


def spatial_correlation_check(
    data: JointDataset,
    fit,
    k: float = 1.0,
    n_bins: int = 10,
    g: DownscalingFunction | None = None,
    min_common_years: int = 3,
) -> CorrelationDiagnostic:
    """Binned empirical pair correlations against the model-implied curve.

    The model correlation for a pair divides the latent-field correlation
    by sqrt{(1 + k var_eps(s)/var_mu)(1 + k var_eps(s')/var_mu)}, where
    var_eps is the GEV variance around the latent location and k scales how
    much of it enters; k = 0 gives the latent correlation alone and is a
    pointwise upper bound.  Pairs with too few common years are excluded
    and counted (constant series likewise, since their Pearson correlation
    is undefined).
    """
    if k < 0.0:
        raise InputError(f"k must be >= 0, got {k}")
    if n_bins < 1:
        raise InputError(f"n_bins must be >= 1, got {n_bins}")
    if g is not None:
        data = apply_downscaling(g, data)

    sites = data.sites
    d = len(sites)
    if d < 2:
        raise InputError("need at least two sites to form pairs")
    cov = covariance_matrix(fit.theta2.cov, sites)
    scale = np.sqrt(np.diag(cov))
    latent_corr = cov / np.outer(scale, scale)
    sigma_mu2 = fit.theta2.cov.sigma2 + fit.theta2.cov.tau**2
    if k > 0.0:
        noise_ratio = np.array(
            [_gev_noise_variance(fit.theta1, s) / sigma_mu2 for s in sites]
        )
        shrink = np.sqrt(1.0 + k * noise_ratio)
    else:
        shrink = np.ones(d)

    model, empirical, excluded = [], [], 0
    for a in range(d):
        rec_a = data.records[a]
        years_a = {y: i for i, y in enumerate(rec_a.years)}
        for b in range(a + 1, d):
            rec_b = data.records[b]
            years_b = {y: i for i, y in enumerate(rec_b.years)}
            common = [y for y in rec_b.years if y in years_a]
            if len(common) < min_common_years:
                excluded += 1
                continue
            xa = np.array([rec_a.values[years_a[y]] for y in common])
            xb = np.array([rec_b.values[years_b[y]] for y in common])
            if np.ptp(xa) == 0.0 or np.ptp(xb) == 0.0:
                excluded += 1
                continue
            model.append(latent_corr[a, b] / (shrink[a] * shrink[b]))
            empirical.append(float(np.corrcoef(xa, xb)[0, 1]))
    if not model:
        raise InputError("no site pair has enough common years")

    order = np.argsort(model)
    model_arr = np.asarray(model)[order]
    empirical_arr = np.asarray(empirical)[order]
    bins = tuple(
        (float(np.mean(m)), float(np.mean(e)), int(m.size))
        for m, e in zip(
            np.array_split(model_arr, n_bins), np.array_split(empirical_arr, n_bins)
        )
        if m.size
    )
    return CorrelationDiagnostic(bins, k, model_arr, empirical_arr, excluded)


def crossvalidate(
    data: JointDataset,
    holdout,
    cfg,
    rng: np.random.Generator | None = None,
    n_g: int = 1000,
    alpha: float = 0.05,
    g: DownscalingFunction | None = None,
    return_fit: bool = False,
):
    """Refit without the held-out field sites, then quantile-plot each one
    against its kriged predictive mixture.

    Per final latent draw the held-out location value is conditionally
    simulated (kriged mean plus a variance-matched normal perturbation), so
    the plotted mixture carries both latent-field and kriging uncertainty.
    Returns {site_id: QuantilePlotData}, plus the reduced fit when
    ``return_fit`` is set.
    """
    from gevfield.mcem import fit_joint_model

    rng = rng if rng is not None else np.random.default_rng(0)
    holdout = list(dict.fromkeys(holdout))
    if not holdout:
        raise InputError("holdout must name at least one site")
    ids = set(data.site_ids)
    unknown = [h for h in holdout if h not in ids]
    if unknown:
        raise InputError(f"unknown holdout site_ids: {', '.join(sorted(unknown))}")
    for h in holdout:
        rec = data.records[data.index_of(h)]
        if rec.location.source_tag is not SourceTag.FIELD:
            raise InputError(f"holdout site {h!r} is not a field site")
    n_field = sum(1 for s in data.sites if s.source_tag is SourceTag.FIELD)
    if len(holdout) >= n_field:
        raise InputError("holdout must be a proper subset of the field sites")

    retained = data.drop(holdout)
    result = fit_joint_model(retained, cfg, rng)

    spec = result.theta2.cov
    mean = result.theta2.mean_structure()
    ret_sites = retained.sites
    factor = krige_factor(spec, ret_sites)
    resid = result.final_draws.draws - mean.mean_vector(ret_sites)

    plots: dict[str, QuantilePlotData] = {}
    for h in holdout:
        rec = data.records[data.index_of(h)]
        target = rec.location
        cross = spec.sigma2 * smooth_correlation(
            spec, cross_distances([target], ret_sites)
        ).ravel()
        weights = factor.solve(cross)
        cond_var = max(spec.sigma2 - float(cross @ weights), 0.0)
        cond_means = mean.mean_at(target) + resid @ weights
        kriged = cond_means + np.sqrt(cond_var) * rng.standard_normal(cond_means.size)

        site_draws = LatentFieldDraws(kriged[:, None], [target])
        plots[h] = quantile_plot(
            target, rec.values_array, site_draws, result.theta1,
            site_id=h, n_g=n_g, alpha=alpha, rng=rng, g=g,
        )
    if return_fit:
        return plots, result
    return plots
