"""Latent-Gaussian spatial modelling of extreme rainfall.

Annual rainfall maxima at gauged sites are modelled with a GEV data layer
whose location parameters are draws from a latent Gaussian process, fitted
by Monte Carlo EM with a Metropolis-within-Gibbs E-step.  The package also
provides kriging of the latent surface, sandwich / Fisher uncertainty,
model diagnostics, synthetic-world simulation and a command line interface.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

# public name -> defining submodule; resolved lazily so that importing the
# package stays cheap and avoids circular imports during startup.
_EXPORTS = {
    "GevParams": "gev",
    "ReturnLevelSpec": "gev",
    "gev_cdf": "gev",
    "gev_log_density": "gev",
    "gev_quantile": "gev",
    "gev_variance": "gev",
    "gev_sample": "gev",
    "return_level": "gev",
    "CovarianceSpec": "spatial",
    "Location": "spatial",
    "SourceTag": "spatial",
    "MeanStructure": "gp",
    "KrigingResult": "gp",
    "LatentFieldDraws": "gp",
    "DownscalingFunction": "model",
    "JointDataset": "model",
    "SiteRecord": "model",
    "SamplerConfig": "sampler",
    "DataLayerParams": "mcem",
    "ProcessLayerParams": "mcem",
    "FitConfig": "mcem",
    "FitResult": "mcem",
    "fit_joint_model": "mcem",
    "QuantilePlotData": "diagnostics",
    "CorrelationDiagnostic": "diagnostics",
    "quantile_plot": "diagnostics",
    "quantile_bounds": "diagnostics",
    "spatial_correlation_check": "diagnostics",
    "crossvalidate": "diagnostics",
    "simulate_world": "synthetic",
    "simulate_misspecified": "synthetic",
    "DailySeries": "ingest",
    "IngestReport": "ingest",
    "extract_annual_maxima": "ingest",
    "load_dataset": "ingest",
    "write_dataset": "ingest",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name: str):
    try:
        module = _EXPORTS[name]
    except KeyError:
        raise AttributeError(f"module 'gevfield' has no attribute {name!r}") from None
    return getattr(importlib.import_module(f"gevfield.{module}"), name)


def __dir__():
    return __all__
