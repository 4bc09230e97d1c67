"""Site locations, planar projection and the powered-exponential covariance.

Distances are Euclidean in km on an equirectangular projection fixed at the
dataset centroid; over a few hundred km the planar error is negligible
relative to the precision of any fitted range parameter.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from gevfield.exceptions import InputError

# km per degree at the equator (east scale is shrunk by cos(lat0))
KM_PER_DEG_LON = 111.32
KM_PER_DEG_LAT = 110.57

_MAX_ABS_LAT = 89.0


class SourceTag(str, enum.Enum):
    """Which observation network a site belongs to."""

    FIELD = "field"
    SIMULATOR = "simulator"


@dataclass(frozen=True)
class Location:
    """A site with planar (km) and geographic coordinates.

    ``east``/``north`` are km offsets from the projection origin; ``lon``,
    ``lat`` in degrees; ``elevation`` in metres.
    """

    east: float
    north: float
    lon: float
    lat: float
    elevation: float
    source_tag: SourceTag


def project_lonlat(lon, lat, origin: tuple[float, float]):
    """Equirectangular projection to (east, north) km about ``origin``.

    Args:
        lon, lat: degrees; scalars or arrays.
        origin: (lon0, lat0) of the projection centre, normally the dataset
            centroid.

    Returns:
        (east, north) in km, matching the input shape.

    Raises:
        InputError: latitudes within 1 degree of a pole, where the
            projection's east scale degenerates.
    """
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    lon0, lat0 = float(origin[0]), float(origin[1])
    if np.any(np.abs(lat) >= _MAX_ABS_LAT) or abs(lat0) >= _MAX_ABS_LAT:
        raise InputError("projection undefined within 1 degree of the poles")
    east = KM_PER_DEG_LON * np.cos(np.deg2rad(lat0)) * (lon - lon0)
    north = KM_PER_DEG_LAT * (lat - lat0)
    if east.ndim == 0:
        return float(east), float(north)
    return east, north


def unproject_lonlat(east, north, origin: tuple[float, float]):
    """Inverse of :func:`project_lonlat` about the same origin.

    The projection is linear in (lon, lat) at a fixed origin, so the
    round trip is exact up to floating-point arithmetic.
    """
    east = np.asarray(east, dtype=float)
    north = np.asarray(north, dtype=float)
    lon0, lat0 = float(origin[0]), float(origin[1])
    if abs(lat0) >= _MAX_ABS_LAT:
        raise InputError("projection undefined within 1 degree of the poles")
    lon = lon0 + east / (KM_PER_DEG_LON * np.cos(np.deg2rad(lat0)))
    lat = lat0 + north / KM_PER_DEG_LAT
    if lon.ndim == 0:
        return float(lon), float(lat)
    return lon, lat


def build_locations(lons, lats, elevations, tags, origin) -> list[Location]:
    """Project coordinate arrays and assemble Location records."""
    east, north = project_lonlat(np.asarray(lons, float), np.asarray(lats, float), origin)
    east = np.atleast_1d(east)
    north = np.atleast_1d(north)
    return [
        Location(float(e), float(n), float(lo), float(la), float(el), SourceTag(tag))
        for e, n, lo, la, el, tag in zip(east, north, lons, lats, elevations, tags)
    ]


@dataclass(frozen=True)
class CovarianceSpec:
    """Powered-exponential covariance parameters.

    Attributes:
        sigma2: marginal variance of the smooth field (mm^2), >= 0.
        tau: nugget scale; tau^2 is the zero-distance variance excess (mm^2).
        phi: range (km), > 0.
        delta: smoothness exponent in (0, 2].
    """

    sigma2: float
    tau: float
    phi: float
    delta: float

    def __post_init__(self):
        if not (self.sigma2 >= 0.0) or not np.isfinite(self.sigma2):
            raise InputError(f"sigma2 must be >= 0 and finite, got {self.sigma2}")
        if not (self.tau >= 0.0) or not np.isfinite(self.tau):
            raise InputError(f"tau must be >= 0 and finite, got {self.tau}")
        if not (self.phi > 0.0) or not np.isfinite(self.phi):
            raise InputError(f"phi must be > 0 and finite, got {self.phi}")
        if not (0.0 < self.delta <= 2.0):
            raise InputError(f"delta must lie in (0, 2], got {self.delta}")


def distance(s: Location, t: Location) -> float:
    """Euclidean km distance between two projected sites."""
    return float(np.hypot(s.east - t.east, s.north - t.north))


def pairwise_distances(sites: list[Location]) -> np.ndarray:
    """D x D matrix of Euclidean km distances."""
    east = np.array([s.east for s in sites])
    north = np.array([s.north for s in sites])
    de = east[:, None] - east[None, :]
    dn = north[:, None] - north[None, :]
    return np.hypot(de, dn)


def cross_distances(targets: list[Location], sites: list[Location]) -> np.ndarray:
    """len(targets) x len(sites) matrix of Euclidean km distances."""
    te = np.array([s.east for s in targets])
    tn = np.array([s.north for s in targets])
    se = np.array([s.east for s in sites])
    sn = np.array([s.north for s in sites])
    return np.hypot(te[:, None] - se[None, :], tn[:, None] - sn[None, :])


def smooth_correlation(spec: CovarianceSpec, d) -> np.ndarray:
    """exp{-(d/phi)^delta}: the continuous (nugget-free) correlation.

    Equals 1 at d=0; this is the correlation of the smooth field component
    and is what enters cross-covariances with unobserved locations.
    """
    d = np.asarray(d, dtype=float)
    return np.exp(-((d / spec.phi) ** spec.delta))


def correlation(spec: CovarianceSpec, s: Location, t: Location) -> float:
    """Correlation between field values at two sites.

    ``1 + tau^2/sigma2`` at exactly zero distance (the nugget jump),
    ``exp{-(d/phi)^delta}`` otherwise.

    Raises:
        InputError: zero distance with sigma2 = 0 and tau > 0, where the
            ratio form is undefined.
    """
    d = distance(s, t)
    if d == 0.0:
        if spec.tau == 0.0:
            return 1.0
        if spec.sigma2 == 0.0:
            raise InputError("zero-distance correlation undefined: sigma2 = 0 with tau > 0")
        return 1.0 + spec.tau**2 / spec.sigma2
    return float(smooth_correlation(spec, d))


def covariance_matrix(spec: CovarianceSpec, sites: list[Location]) -> np.ndarray:
    """D x D covariance: sigma2 * smooth correlation, plus tau^2 on the diagonal.

    Warns when two distinct sites share coordinates: without a nugget the
    matrix is then singular.
    """
    if len(sites) < 1:
        raise InputError("covariance_matrix needs at least one site")
    dist = pairwise_distances(sites)
    off_diag_zero = (dist == 0.0) & ~np.eye(len(sites), dtype=bool)
    if np.any(off_diag_zero):
        warnings.warn(
            "duplicate site coordinates: covariance matrix is singular without a nugget",
            stacklevel=2,
        )
    cov = spec.sigma2 * smooth_correlation(spec, dist)
    np.fill_diagonal(cov, spec.sigma2 + spec.tau**2)
    return cov
