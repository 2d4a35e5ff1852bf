"""Latitude-longitude to HEALPix regridding by inverse-distance weighting."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .healpix import ang2vec, check_level, pixel_centers


@dataclass
class LatLonGrid:
    """Regular grid; ``values[i, j]`` sits at ``latitudes[i]``, ``longitudes[j]`` (degrees)."""

    latitudes: np.ndarray
    longitudes: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.latitudes = np.asarray(self.latitudes, dtype=np.float64)
        self.longitudes = np.asarray(self.longitudes, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        _check_axes(self.latitudes, self.longitudes)
        if self.values.shape[-2:] != (self.latitudes.size, self.longitudes.size):
            raise ValueError(
                f"values shape {self.values.shape} does not match axes "
                f"({self.latitudes.size}, {self.longitudes.size})")


def _check_axes(lat, lon):
    if lat.ndim != 1 or lon.ndim != 1 or lat.size == 0 or lon.size == 0:
        raise ValueError("grid axes must be non-empty 1-d arrays")
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise ValueError("grid axes must be finite")
    if lat.size > 1 and not np.all(np.diff(lat) < 0):
        raise ValueError("latitudes must be strictly descending")
    if lon.size > 1 and not np.all(np.diff(lon) > 0):
        raise ValueError("longitudes must be strictly ascending")
    if np.any(np.abs(lat) > 90):
        raise ValueError("latitudes must lie in [-90, 90]")


def idw_weights(lat, lon, level, n_neighbors=4, power=1.0, exact_tol=1e-12):
    """Neighbour indices (into the flattened grid) and normalised weights per pixel.

    Returns ``(index, weight)``, both of shape ``(npix, n_neighbors)``. A pixel
    whose center is within ``exact_tol`` radians of a node takes that node's
    value verbatim (a single weight of one).
    """
    level = check_level(level)
    if n_neighbors < 1:
        raise ValueError("n_neighbors must be >= 1")
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    _check_axes(lat, lon)
    lat2, lon2 = np.meshgrid(np.deg2rad(lat), np.deg2rad(lon), indexing="ij")
    nodes = ang2vec(0.5 * np.pi - lat2.ravel(), lon2.ravel())
    k = min(n_neighbors, nodes.shape[0])
    theta, phi = pixel_centers(level)
    chord, idx = cKDTree(nodes).query(ang2vec(theta, phi), k=k)
    chord = chord.reshape(len(theta), k)
    idx = idx.reshape(len(theta), k)
    dist = 2.0 * np.arcsin(np.clip(0.5 * chord, 0.0, 1.0))

    exact = dist[:, 0] < exact_tol
    w = np.zeros_like(dist)
    safe = np.where(exact[:, None], 1.0, dist)
    w[~exact] = safe[~exact] ** (-power)
    w[exact, 0] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def remap_to_healpix(grid, level, n_neighbors=4, power=1.0):
    """Regrid a :class:`LatLonGrid` (optionally with leading time axes) to ``level``."""
    return HealpixRemapper(level, n_neighbors, power).fit(
        grid.latitudes, grid.longitudes).transform(grid.values)


class HealpixRemapper(TransformerMixin, BaseEstimator):
    """Cache IDW weights for one source grid and apply them to many fields.

    ``fit`` takes the latitude and longitude axes (degrees); ``transform``
    takes values shaped ``(..., n_lat, n_lon)`` and returns ``(..., npix)``.
    """

    def __init__(self, level=8, n_neighbors=4, power=1.0):
        self.level = level
        self.n_neighbors = n_neighbors
        self.power = power

    def fit(self, lat, lon=None):
        if lon is None:
            raise TypeError("fit requires both latitude and longitude axes")
        self.index_, self.weight_ = idw_weights(lat, lon, self.level, self.n_neighbors, self.power)
        self.grid_shape_ = (np.size(lat), np.size(lon))
        return self

    def transform(self, values):
        check_is_fitted(self, "index_")
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-2:] != self.grid_shape_:
            raise ValueError(f"expected trailing shape {self.grid_shape_}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid values must be finite")
        flat = values.reshape(values.shape[:-2] + (-1,))
        return np.sum(flat[..., self.index_] * self.weight_, axis=-1)
