import csv

import numpy as np
import pytest

from fieldspace.healpix import npix, pixel_centers
from fieldspace.metrics import (METRICS_HEADER, SPECTRUM_HEADER, angular_power_spectrum,
                                evaluate_fields, psnr, rmse_healpix, rmse_latweighted,
                                spectral_slope, write_metrics_csv, write_spectrum_csv)
from fieldspace.sph import real_ylm


def test_latweighted_hand_oracle():
    x = np.zeros((2, 2))
    x_hat = np.array([[1.0, 1.0], [2.0, 2.0]])
    assert rmse_latweighted(x, x_hat, [0.0, 60.0]) == pytest.approx(np.sqrt(2), abs=1e-15)


def test_latweighted_properties(rng):
    x = rng.standard_normal((3, 4, 8))
    assert rmse_latweighted(x, x, np.linspace(60, -60, 4)) == 0.0
    row = rng.standard_normal((1, 9)), rng.standard_normal((1, 9))
    assert rmse_latweighted(*row, [37.0]) == pytest.approx(np.sqrt(np.mean((row[0] - row[1]) ** 2)))
    with pytest.raises(ValueError):
        rmse_latweighted(x, x[:, :3], [0, 1, 2])


def test_rmse_healpix(rng):
    x = rng.standard_normal((3, npix(2)))
    assert rmse_healpix(x, x) == 0.0
    assert rmse_healpix(x, x + 2.5) == pytest.approx(2.5)
    y = rng.standard_normal((3, npix(2)))
    total = 0.0
    for i in range(3):
        for j in range(npix(2)):
            total += (x[i, j] - y[i, j]) ** 2
    assert rmse_healpix(x, y) == pytest.approx(np.sqrt(total / (3 * npix(2))), rel=1e-12)
    with pytest.raises(ValueError):
        rmse_healpix(x[:, :40], y[:, :40])


def test_psnr_laws(rng):
    x = rng.uniform(0, 10, 1000)
    rng_x = x.max() - x.min()
    e = rng.standard_normal(1000)
    e /= np.sqrt(np.mean(e ** 2))
    assert psnr(x, x + rng_x * e) == pytest.approx(0.0, abs=1e-10)
    assert psnr(x, x + rng_x / 10 * e) == pytest.approx(20.0, abs=1e-10)
    assert psnr(x, x + e) - psnr(x, x + 2 * e) == pytest.approx(20 * np.log10(2), abs=1e-10)
    assert psnr(x, x) == np.inf
    with pytest.raises(ValueError):
        psnr(np.ones(5), np.zeros(5))


def test_constant_monopole():
    c = 1.7
    res = angular_power_spectrum(np.full(npix(4), c))
    assert res.cl_mean[0] == pytest.approx(4 * np.pi * c * c, rel=1e-6)
    assert np.all(res.cl_mean[1:] <= 1e-6 * res.cl_mean[0])


def test_pure_harmonic():
    f = real_ylm(3, 2, *pixel_centers(4))
    res = angular_power_spectrum(f)
    cl = res.cl_mean
    assert np.argmax(cl) == 3
    assert np.all(np.delete(cl, 3) <= 1e-3 * cl[3])


def test_rotation_scaling_and_stats(rng):
    f = rng.standard_normal((4, npix(4)))
    res = angular_power_spectrum(f)
    assert res.cl.shape == (4, 48) and np.all(res.cl >= 0)
    np.testing.assert_allclose(res.cl_mean, res.cl.mean(0))
    np.testing.assert_allclose(res.cl_std, res.cl.std(0))
    assert res.ell[-1] == 3 * 16 - 1
    scaled = angular_power_spectrum(3 * f)
    np.testing.assert_allclose(scaled.cl_mean, 9 * res.cl_mean, rtol=1e-12)
    with pytest.raises(ValueError):
        angular_power_spectrum(f, lmax=48)


def test_spectral_slope_of_power_law():
    class R:
        ell = np.arange(20)
        cl_mean = np.r_[1.0, (np.arange(1, 20) ** -3.0)]
    assert spectral_slope(R, 2, 12) == pytest.approx(-3.0)


def test_csv_outputs(tmp_path, rng):
    x = rng.standard_normal((2, npix(2)))
    rows = evaluate_fields(x, x + 0.1, "tas", "K")
    write_metrics_csv(tmp_path / "m.csv", rows)
    table = list(csv.reader(open(tmp_path / "m.csv")))
    assert tuple(table[0]) == METRICS_HEADER == ("variable", "metric", "value", "units")
    assert table[1][:2] == ["tas", "rmse"] and float(table[1][2]) == pytest.approx(0.1)
    assert table[2][1] == "psnr" and "peak" in table[2][3]
    write_spectrum_csv(tmp_path / "s.csv", angular_power_spectrum(x))
    table = list(csv.reader(open(tmp_path / "s.csv")))
    assert tuple(table[0]) == SPECTRUM_HEADER == ("ell", "C_mean", "C_std")
    assert len(table) == 1 + 12
