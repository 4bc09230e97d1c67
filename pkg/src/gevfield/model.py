"""Joint field/simulator model structure: datasets, designs and parameters.

Two observation networks share one latent spatial surface.  Field (gauge)
and simulator sites get separate covariate blocks: per-source intercept,
elevation, latitude and longitude for the latent mean; per-source intercept
and elevation for the log GEV scale; per-source constant GEV shape.  A
field-only dataset produces field-only columns rather than zero-padding.

Coordinates play two distinct roles: latitude/longitude enter the design in
raw degrees, while correlation distances use the projected km plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from gevfield.exceptions import InputError
from gevfield.spatial import Location, SourceTag

_TAG_LETTER = {SourceTag.FIELD: "F", SourceTag.SIMULATOR: "M"}

# covariates entering the latent-mean design, in column order per source
LOCATION_COVARIATES = ("intercept", "elevation", "lat", "lon")


@dataclass(frozen=True)
class DownscalingFunction:
    """Monotone map applied to simulator output before joint modelling.

    ``identity`` leaves values untouched (the adopted choice); ``affine``
    provides a strictly increasing test hook.
    """

    kind: str = "identity"
    slope: float = 1.0
    intercept: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "affine"):
            raise InputError(f"unknown downscaling kind {self.kind!r}")
        if self.kind == "affine" and not self.slope > 0.0:
            raise InputError("affine downscaling must be strictly increasing (slope > 0)")

    def __call__(self, x):
        if self.kind == "identity":
            return x
        return self.slope * np.asarray(x, dtype=float) + self.intercept


@dataclass(frozen=True)
class SiteRecord:
    """One site's annual maxima series (possibly ragged across sites)."""

    site_id: str
    location: Location
    years: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.years) != len(self.values):
            raise InputError(f"site {self.site_id}: years/values length mismatch")
        if len(self.years) < 1:
            raise InputError(f"site {self.site_id}: needs at least one annual maximum")
        if len(set(self.years)) != len(self.years):
            raise InputError(f"site {self.site_id}: duplicate years")
        if not all(math.isfinite(v) and v > 0.0 for v in self.values):
            raise InputError(f"site {self.site_id}: maxima must be positive and finite")
        for c in (self.location.elevation, self.location.lat, self.location.lon):
            if not math.isfinite(c):
                raise InputError(f"site {self.site_id}: non-finite covariate")

    @property
    def values_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class JointDataset:
    """Validated collection of sites with their annual maxima.

    ``origin`` is the (lon, lat) projection centre shared by every site's
    planar coordinates; subsetting preserves it so distances stay comparable
    across refits.
    """

    records: tuple[SiteRecord, ...]
    origin: tuple[float, float]

    def __post_init__(self):
        ids = [r.site_id for r in self.records]
        if len(self.records) < 1:
            raise InputError("dataset must contain at least one site")
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise InputError(f"duplicate site_ids: {', '.join(dupes)}")

    @property
    def n_sites(self) -> int:
        return len(self.records)

    @property
    def sites(self) -> list[Location]:
        return [r.location for r in self.records]

    @property
    def site_ids(self) -> list[str]:
        return [r.site_id for r in self.records]

    def source_order(self) -> tuple[SourceTag, ...]:
        present = {r.location.source_tag for r in self.records}
        return tuple(t for t in (SourceTag.FIELD, SourceTag.SIMULATOR) if t in present)

    def values_by_site(self) -> list[np.ndarray]:
        return [r.values_array for r in self.records]

    def index_of(self, site_id: str) -> int:
        for k, r in enumerate(self.records):
            if r.site_id == site_id:
                return k
        raise InputError(f"unknown site_id {site_id!r}")

    def subset(self, keep_ids) -> "JointDataset":
        keep = set(keep_ids)
        unknown = keep - set(self.site_ids)
        if unknown:
            raise InputError(f"unknown site_ids: {', '.join(sorted(unknown))}")
        kept = tuple(r for r in self.records if r.site_id in keep)
        return JointDataset(kept, self.origin)

    def drop(self, drop_ids) -> "JointDataset":
        drop = set(drop_ids)
        unknown = drop - set(self.site_ids)
        if unknown:
            raise InputError(f"unknown site_ids: {', '.join(sorted(unknown))}")
        kept = tuple(r for r in self.records if r.site_id not in drop)
        if not kept:
            raise InputError("cannot drop every site")
        return JointDataset(kept, self.origin)


def apply_downscaling(g: DownscalingFunction, dataset: JointDataset) -> JointDataset:
    """Transform simulator-tagged maxima by ``g``; field values untouched."""
    out = []
    for r in dataset.records:
        if r.location.source_tag is SourceTag.SIMULATOR:
            out.append(replace(r, values=tuple(float(g(v)) for v in r.values)))
        else:
            out.append(r)
    return JointDataset(tuple(out), dataset.origin)


# ---------------------------------------------------------------------------
# covariate designs


def source_index(site: Location, order: tuple[SourceTag, ...]) -> int:
    try:
        return order.index(site.source_tag)
    except ValueError:
        raise InputError(
            f"site tagged {site.source_tag.value!r} not covered by design sources "
            f"{[t.value for t in order]}"
        ) from None


def location_design_row(site: Location, order: tuple[SourceTag, ...]) -> np.ndarray:
    """Latent-mean covariate row: per-source (intercept, elevation, lat, lon)."""
    row = np.zeros(4 * len(order))
    k = source_index(site, order)
    row[4 * k : 4 * k + 4] = (1.0, site.elevation, site.lat, site.lon)
    return row


def location_design(sites: list[Location], order: tuple[SourceTag, ...]) -> np.ndarray:
    return np.vstack([location_design_row(s, order) for s in sites])


def scale_design_row(site: Location, order: tuple[SourceTag, ...]) -> np.ndarray:
    """log-scale covariate row: per-source (intercept, elevation)."""
    row = np.zeros(2 * len(order))
    k = source_index(site, order)
    row[2 * k : 2 * k + 2] = (1.0, site.elevation)
    return row


def theta1_parameter_names(order: tuple[SourceTag, ...]) -> list[str]:
    names = []
    for tag in order:
        letter = _TAG_LETTER[tag]
        names += [f"psi_{letter}_0", f"psi_{letter}_1"]
    names += [f"xi_{_TAG_LETTER[tag]}" for tag in order]
    return names


def theta2_parameter_names(order: tuple[SourceTag, ...]) -> list[str]:
    names = []
    for tag in order:
        letter = _TAG_LETTER[tag]
        names += [f"mu_{letter}_{j}" for j in range(4)]
    return names + ["sigma_mu", "phi", "delta", "tau"]


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class DataLayerParams:
    """Per-source GEV scale coefficients and shapes.

    Scale varies with elevation on the log scale, so positivity holds by
    construction: psi(s) = exp{psi0 + psi1 * elevation(s)}.
    """

    sources: tuple[SourceTag, ...]
    psi0: tuple[float, ...]
    psi1: tuple[float, ...]
    xi: tuple[float, ...]

    def __post_init__(self):
        n = len(self.sources)
        if not (len(self.psi0) == len(self.psi1) == len(self.xi) == n):
            raise InputError("per-source parameter tuples must align with sources")
        vals = self.psi0 + self.psi1 + self.xi
        if not all(math.isfinite(v) for v in vals):
            raise InputError("data-layer parameters must be finite")

    def psi_at(self, site: Location) -> float:
        k = source_index(site, self.sources)
        return math.exp(self.psi0[k] + self.psi1[k] * site.elevation)

    def xi_at(self, site: Location) -> float:
        return self.xi[source_index(site, self.sources)]

    def as_vector(self) -> np.ndarray:
        out = []
        for k in range(len(self.sources)):
            out += [self.psi0[k], self.psi1[k]]
        out += list(self.xi)
        return np.asarray(out)

    @classmethod
    def from_vector(cls, v: np.ndarray, sources: tuple[SourceTag, ...]) -> "DataLayerParams":
        n = len(sources)
        if len(v) != 3 * n:
            raise InputError(f"expected {3 * n} data-layer parameters, got {len(v)}")
        psi0 = tuple(float(v[2 * k]) for k in range(n))
        psi1 = tuple(float(v[2 * k + 1]) for k in range(n))
        xi = tuple(float(x) for x in v[2 * n :])
        return cls(sources, psi0, psi1, xi)

    def names(self) -> list[str]:
        return theta1_parameter_names(self.sources)


@dataclass(frozen=True, eq=False)
class ProcessLayerParams:
    """Latent-surface parameters: mean coefficients plus covariance."""

    sources: tuple[SourceTag, ...]
    beta: np.ndarray
    cov: "CovarianceSpec"  # noqa: F821  (typing only; import stays one-way)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        object.__setattr__(self, "beta", beta)
        if beta.shape != (4 * len(self.sources),):
            raise InputError(
                f"beta must have {4 * len(self.sources)} entries for {len(self.sources)} "
                f"source(s), got shape {beta.shape}"
            )
        if not np.all(np.isfinite(beta)):
            raise InputError("mean coefficients must be finite")

    def mean_at(self, sites: list[Location]) -> np.ndarray:
        return location_design(sites, self.sources) @ self.beta

    def mean_structure(self):
        from gevfield.gp import MeanStructure

        order = self.sources
        return MeanStructure(self.beta.copy(), lambda s: location_design_row(s, order))

    def names(self) -> list[str]:
        return theta2_parameter_names(self.sources)

    def as_vector(self) -> np.ndarray:
        """Values aligned with names(): coefficients then sigma_mu, phi, delta, tau."""
        c = self.cov
        return np.concatenate([self.beta, [math.sqrt(c.sigma2), c.phi, c.delta, c.tau]])
