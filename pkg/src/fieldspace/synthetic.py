"""Synthetic smooth spherical fields for desk-scale runs."""
import numpy as np

from .healpix import check_level, nside, pixel_centers
from .sph import RingTransform, n_coeffs

DEFAULT_LMAX_CAP = 95  # power beyond this is negligible; the direct transform is O(lmax^2 npix)


def power_law_cl(lmax, slope, lmin=1):
    ell = np.arange(lmax + 1, dtype=np.float64)
    cl = np.zeros(lmax + 1)
    cl[lmin:] = ell[lmin:] ** (-slope)
    return cl


def random_alm(cl, n, rng):
    """Gaussian real coefficients with ``<a_lm^2> = C_l``; shape ``(n, ncoef)``."""
    lmax = cl.size - 1
    var = np.repeat(cl, 2 * np.arange(lmax + 1) + 1)
    return rng.standard_normal((n, n_coeffs(lmax))) * np.sqrt(var)


def generate_fields(level, count, slope=3.0, seed=0, lmax=None, start_day=0, mean=15.0,
                    amplitude=10.0, seasonal_amplitude=5.0):
    """Random band-limited fields with ``C_l ~ l**-slope`` plus an annual cycle.

    Returns ``(values, days)`` where ``values`` is ``(count, npix)`` and
    ``days`` are consecutive integer day offsets starting at ``start_day``.
    The annual cycle is a north-south dipole whose sign follows
    ``cos(2 pi day / 365.25)``, so it only touches ``l = 1``.
    The default band limit is ``min(3 nside - 1, DEFAULT_LMAX_CAP)``.
    """
    level = check_level(level)
    if not np.isfinite(slope) or slope <= 0:
        raise ValueError("spectral slope must be a positive finite number")
    if count < 0:
        raise ValueError("count must be non-negative")
    lmax = min(3 * nside(level) - 1, DEFAULT_LMAX_CAP) if lmax is None else int(lmax)
    days = np.arange(start_day, start_day + count, dtype=np.int64)
    if count == 0:
        return np.zeros((0, 12 * 4 ** level)), days
    rng = np.random.default_rng(seed)
    cl = power_law_cl(lmax, slope)
    # normalise so the anomaly field has unit variance before scaling
    cl /= np.sum((2 * np.arange(lmax + 1) + 1) * cl) / (4 * np.pi)
    alm = random_alm(cl, count, rng)
    anomalies = RingTransform(level, lmax).alm2map(alm)
    theta, _ = pixel_centers(level)
    season = np.cos(2 * np.pi * days / 365.25)[:, None] * np.cos(theta)[None, :]
    return mean + amplitude * anomalies + seasonal_amplitude * season, days
