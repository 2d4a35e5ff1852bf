"""Multi-scale residual decomposition of nested HEALPix fields.

A field at level ``z_in`` is split into a coarse base (the area mean at
``base_level``) and residuals at a contiguous ladder of finer levels. Every
array helper here works on the last axis, so leading batch/time/variable axes
pass through untouched.
"""
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .healpix import check_level, level_from_npix, npix
from .validation import check_fields


def _level_of(values, z=None):
    n = np.shape(values)[-1]
    if z is None:
        return level_from_npix(n)
    z = check_level(z)
    if n != npix(z):
        raise ValueError(f"array has {n} pixels, level {z} needs {npix(z)}")
    return z


def downsample_avg(values, z_target, z=None):
    """Average each coarse cell over its ``4**(z - z_target)`` descendants."""
    z = _level_of(values, z)
    z_target = check_level(z_target)
    if z_target > z:
        raise ValueError(f"cannot downsample level {z} to finer level {z_target}")
    values = np.asarray(values)
    if z_target == z:
        return values.copy()
    k = 4 ** (z - z_target)
    return values.reshape(values.shape[:-1] + (npix(z_target), k)).mean(axis=-1)


def broadcast(values, z_target, z=None):
    """Copy every value onto all of its descendants at ``z_target``."""
    z = _level_of(values, z)
    z_target = check_level(z_target)
    if z_target < z:
        raise ValueError(f"cannot broadcast level {z} to coarser level {z_target}")
    return np.repeat(np.asarray(values), 4 ** (z_target - z), axis=-1)


def scale_conserve(residual, group_level, z=None):
    """Remove the mean of every group of pixels sharing an ancestor at ``group_level``."""
    z = _level_of(residual, z)
    if group_level >= z:
        raise ValueError("group_level must be coarser than the residual level")
    means = downsample_avg(residual, group_level, z)
    return np.asarray(residual) - broadcast(means, z, group_level)


def check_ladder(base_level, residual_levels, top_level=None):
    """Validate a (base, residual ladder) pair; return sorted residual levels."""
    base_level = check_level(base_level)
    levels = sorted(check_level(z) for z in residual_levels)
    if not levels:
        raise ValueError("at least one residual level is required")
    if len(set(levels)) != len(levels):
        raise ValueError("duplicate residual levels")
    if levels != list(range(levels[0], levels[-1] + 1)):
        raise ValueError(f"residual levels must be contiguous, got {levels}")
    if base_level >= levels[0]:
        raise ValueError("base level must be coarser than every residual level")
    if top_level is not None and levels[-1] != top_level:
        raise ValueError(
            f"finest residual level {levels[-1]} must equal the input level {top_level}")
    return levels


def group_level(base_level, residual_levels, z):
    """Ancestor level whose groups each residual at ``z`` has zero mean over.

    The lowest residual is measured against the base across the level gap,
    so its groups are the base cells; the others are plain sibling quartets.
    """
    return base_level if z == min(residual_levels) else z - 1


@dataclass
class MultiScaleState:
    """Coarse base plus residual ladder. Arrays may carry leading batch axes."""

    base: np.ndarray
    base_level: int
    residuals: dict = field(default_factory=dict)

    @property
    def levels(self):
        return sorted(self.residuals)

    @property
    def top_level(self):
        return max(self.residuals)

    def copy(self):
        return MultiScaleState(self.base.copy(), self.base_level,
                               {z: r.copy() for z, r in self.residuals.items()})


def decompose(x, base_level, residual_levels, z=None):
    """Split ``x`` into a base at ``base_level`` and residuals at ``residual_levels``."""
    z = _level_of(x, z)
    levels = check_ladder(base_level, residual_levels, top_level=z)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("field contains non-finite values")
    means = {zz: downsample_avg(x, zz, z) for zz in [base_level] + levels}
    residuals = {}
    prev = base_level
    for zz in levels:
        residuals[zz] = means[zz] - broadcast(means[prev], zz, prev)
        prev = zz
    z0 = levels[0]
    residuals[z0] = scale_conserve(residuals[z0], base_level, z0)
    return MultiScaleState(means[base_level], base_level, residuals)


def reconstruct(state):
    """Sum base and residuals at the finest residual level (ascending order)."""
    top = state.top_level
    out = broadcast(state.base, top, state.base_level).astype(np.float64)
    for zz in state.levels:
        out = out + broadcast(state.residuals[zz], top, zz)
    return out


def mask_residuals(state, levels):
    """Zero the residuals at ``levels``; shapes are left unchanged."""
    levels = set(int(z) for z in levels)
    missing = levels - set(state.residuals)
    if missing:
        raise ValueError(f"levels {sorted(missing)} are not in the residual ladder")
    res = {z: (np.zeros_like(r) if z in levels else r.copy())
           for z, r in state.residuals.items()}
    return replace(state, base=state.base.copy(), residuals=res)


class MultiScaleDecomposer(TransformerMixin, BaseEstimator):
    """Stateless transformer between fields and flat multi-scale coefficient rows.

    Each output row is ``[base | r(z0) | r(z0+1) | ...]``; ``inverse_transform``
    reassembles the field.

    Parameters
    ----------
    base_level : int
        Level of the stored coarse mean.
    residual_levels : tuple of int
        Contiguous residual ladder whose finest level equals the input level.
    mask_levels : tuple of int
        Residual levels zeroed on ``transform`` (zero-shot super-resolution).
    """

    def __init__(self, base_level=3, residual_levels=(6, 7, 8), mask_levels=()):
        self.base_level = base_level
        self.residual_levels = residual_levels
        self.mask_levels = mask_levels

    def fit(self, X, y=None):
        self.levels_ = check_ladder(self.base_level, self.residual_levels)
        X = check_fields(X, level=self.levels_[-1])
        self.n_features_in_ = X.shape[1]
        return self

    def _split_sizes(self):
        return [npix(self.base_level)] + [npix(z) for z in self.levels_]

    def transform(self, X):
        X = check_fields(X, level=self.levels_[-1])
        state = decompose(X, self.base_level, self.levels_)
        if self.mask_levels:
            state = mask_residuals(state, self.mask_levels)
        return np.concatenate([state.base] + [state.residuals[z] for z in self.levels_], axis=-1)

    def to_state(self, rows):
        parts = np.split(np.asarray(rows, dtype=np.float64),
                         np.cumsum(self._split_sizes())[:-1], axis=-1)
        return MultiScaleState(parts[0], self.base_level, dict(zip(self.levels_, parts[1:])))

    def inverse_transform(self, X):
        return reconstruct(self.to_state(X))
