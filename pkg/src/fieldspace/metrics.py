"""Evaluation metrics: area-consistent RMSE, PSNR and angular power spectra."""
import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .healpix import level_from_npix, nside
from .sph import RingTransform, cl_from_alm
from .validation import check_finite, check_same_shape


def rmse_latweighted(x, x_hat, latitudes):
    """Latitude-weighted RMSE on regular grids.

    ``x`` and ``x_hat`` have shape ``(..., n_lat, n_lon)``; leading axes (time)
    are pooled. Weights are ``cos(latitude)`` of each row, in degrees.
    """
    x, x_hat = check_same_shape(x, x_hat, "fields")
    lat = np.asarray(latitudes, dtype=np.float64)
    if x.ndim < 2 or lat.shape != (x.shape[-2],):
        raise ValueError("latitudes must match the second-to-last axis")
    w = np.broadcast_to(np.cos(np.deg2rad(lat))[:, None], x.shape)
    return float(np.sqrt(np.sum(w * (x - x_hat) ** 2) / np.sum(w)))


def rmse_healpix(x, x_hat):
    """Plain RMSE over all pixels (and any leading axes); HEALPix cells are equal-area."""
    x, x_hat = check_same_shape(x, x_hat, "fields")
    level_from_npix(x.shape[-1])
    return float(np.sqrt(np.mean((x - x_hat) ** 2)))


def psnr(x, x_hat, data_range=None):
    """Peak signal-to-noise ratio in dB, peak = ground-truth range (max - min).

    Returns ``inf`` for a perfect reconstruction.
    """
    x, x_hat = check_same_shape(x, x_hat, "fields")
    if data_range is None:
        data_range = float(np.max(x) - np.min(x))
    if not data_range > 0:
        raise ValueError("ground truth has zero range")
    err = float(np.sqrt(np.mean((x - x_hat) ** 2)))
    if err == 0.0:
        return float("inf")
    return 20.0 * np.log10(data_range / err)


@dataclass
class SpectrumResult:
    ell: np.ndarray
    cl_mean: np.ndarray
    cl_std: np.ndarray
    cl: Optional[np.ndarray] = None  # (n_timesteps, lmax + 1)


def angular_power_spectrum(maps, lmax=None, keep_timesteps=True):
    """Per-timestep ``C_l`` by direct quadrature plus mean/std over timesteps.

    ``maps`` is ``(n_pixels,)`` or ``(n_timesteps, n_pixels)``. The default
    ``lmax`` is ``3 * nside - 1``, the largest allowed.
    """
    maps = np.atleast_2d(check_finite(maps, "maps"))
    z = level_from_npix(maps.shape[-1])
    limit = 3 * nside(z) - 1
    lmax = limit if lmax is None else int(lmax)
    if not 0 <= lmax <= limit:
        raise ValueError(f"lmax must be in [0, {limit}] at level {z}")
    cl = cl_from_alm(RingTransform(z, lmax).map2alm(maps), lmax)
    return SpectrumResult(np.arange(lmax + 1), cl.mean(axis=0), cl.std(axis=0),
                          cl if keep_timesteps else None)


def spectral_slope(result, lmin, lmax):
    """Least-squares slope of ``log C_l`` against ``log l`` over ``[lmin, lmax]``."""
    ell = result.ell[lmin:lmax + 1]
    return float(np.polyfit(np.log(ell), np.log(result.cl_mean[lmin:lmax + 1]), 1)[0])


METRICS_HEADER = ("variable", "metric", "value", "units")
SPECTRUM_HEADER = ("ell", "C_mean", "C_std")


def evaluate_fields(x, x_hat, variable="", units=""):
    """Metric rows for the CSV table; PSNR peak is the truth range, declared in units."""
    rows = [(variable, "rmse", rmse_healpix(x, x_hat), units)]
    rows.append((variable, "psnr", psnr(x, x_hat), "dB (peak=truth range)"))
    return rows


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for var, metric, value, units in rows:
            w.writerow([var, metric, repr(float(value)), units])


def write_spectrum_csv(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SPECTRUM_HEADER)
        for l, m, s in zip(result.ell, result.cl_mean, result.cl_std):
            w.writerow([int(l), repr(float(m)), repr(float(s))])
