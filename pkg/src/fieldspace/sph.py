"""Real orthonormal spherical harmonics and direct HEALPix quadrature transforms.

Coefficients are stored flat with index ``l*l + l + m`` for ``-l <= m <= l``.
Real harmonics use the Condon-Shortley phase:

* ``m > 0``: ``sqrt(2) * Pbar_lm(cos theta) * cos(m phi)``
* ``m = 0``: ``Pbar_l0(cos theta)``
* ``m < 0``: ``sqrt(2) * Pbar_l|m|(cos theta) * sin(|m| phi)``

where ``Pbar`` is the associated Legendre function normalised so that the
complex ``Y_lm`` are orthonormal on the unit sphere.
"""
import numpy as np
from scipy import sparse

from .healpix import check_level, npix, pixel_centers, ring_index


def n_coeffs(lmax):
    return (lmax + 1) ** 2


def lm_index(l, m):
    return l * l + l + m


def legendre_normalized(lmax, theta):
    """``Pbar[l, m, i]`` for ``0 <= m <= l <= lmax`` at colatitudes ``theta``.

    Uses the standard three-term recurrence in ``l`` starting from the
    sectoral terms, which is stable well beyond ``l = 50``.
    """
    if lmax < 0:
        raise ValueError("lmax must be non-negative")
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    x = np.cos(theta)
    s = np.sin(theta)
    out = np.zeros((lmax + 1, lmax + 1, theta.size))
    pmm = np.full(theta.size, 1.0 / np.sqrt(4.0 * np.pi))
    for m in range(lmax + 1):
        if m > 0:
            pmm = -np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s * pmm
        out[m, m] = pmm
        if m + 1 <= lmax:
            out[m + 1, m] = np.sqrt(2.0 * m + 3.0) * x * pmm
        for l in range(m + 2, lmax + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            out[l, m] = a * (x * out[l - 1, m] - b * out[l - 2, m])
    return out


def real_sph_harm(lmax, theta, phi):
    """Matrix of real harmonics, shape ``(n_points, (lmax+1)**2)``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    plm = legendre_normalized(lmax, theta)
    Y = np.empty((theta.size, n_coeffs(lmax)))
    r2 = np.sqrt(2.0)
    for l in range(lmax + 1):
        Y[:, lm_index(l, 0)] = plm[l, 0]
        for m in range(1, l + 1):
            Y[:, lm_index(l, m)] = r2 * plm[l, m] * np.cos(m * phi)
            Y[:, lm_index(l, -m)] = r2 * plm[l, m] * np.sin(m * phi)
    return Y


def real_ylm(l, m, theta, phi):
    """A single real harmonic evaluated at the given points."""
    if abs(m) > l:
        raise ValueError("|m| must not exceed l")
    theta = np.asarray(theta, dtype=np.float64)
    p = legendre_normalized(l, theta.ravel())[l, abs(m)].reshape(theta.shape)
    if m == 0:
        return p
    trig = np.cos if m > 0 else np.sin
    return np.sqrt(2.0) * p * trig(abs(m) * np.asarray(phi, dtype=np.float64))


class RingTransform:
    """Direct (non-fast) harmonic analysis/synthesis on a HEALPix level.

    Work is organised per iso-latitude ring so the Legendre functions are
    evaluated once per ring instead of once per pixel.
    """

    _CHUNK = 1 << 22  # elements per (pixel, m) block

    def __init__(self, z, lmax):
        self.z = check_level(z)
        if lmax < 0:
            raise ValueError("lmax must be non-negative")
        self.lmax = int(lmax)
        theta, phi = pixel_centers(self.z)
        self.ring = ring_index(self.z)
        n_ring = int(self.ring.max()) + 1
        ring_theta = np.zeros(n_ring)
        ring_theta[self.ring] = theta
        self._plm = legendre_normalized(self.lmax, ring_theta)  # (l, m, ring)
        self._phi = phi
        self._n_ring = n_ring
        self._ring_sum = sparse.csc_matrix(
            (np.ones(phi.size), (self.ring, np.arange(phi.size))), shape=(n_ring, phi.size))
        self.weight = 4.0 * np.pi / npix(self.z)

    def _chunks(self):
        # azimuthal factors are built per pixel block to bound memory at high levels
        m = np.arange(self.lmax + 1)
        step = max(1, self._CHUNK // (self.lmax + 1))
        for start in range(0, self._phi.size, step):
            sl = slice(start, start + step)
            mp = np.outer(self._phi[sl], m)
            yield sl, np.cos(mp), np.sin(mp)

    def map2alm(self, maps):
        """Quadrature ``a_lm = (4 pi / N) sum_p f_p Y_lm(p)``; shape ``(n_maps, ncoef)``."""
        maps = np.asarray(maps, dtype=np.float64)
        squeeze = maps.ndim == 1
        maps = np.atleast_2d(maps)
        if maps.shape[1] != npix(self.z):
            raise ValueError(f"expected {npix(self.z)} pixels, got {maps.shape[1]}")
        sc = np.zeros((maps.shape[0], self._n_ring, self.lmax + 1))
        ss = np.zeros_like(sc)
        k, nm = maps.shape[0], self.lmax + 1
        for sl, cos, sin in self._chunks():
            rs = self._ring_sum[:, sl]
            for acc, trig in ((sc, cos), (ss, sin)):
                prod = (maps[:, sl, None] * trig).transpose(1, 0, 2).reshape(-1, k * nm)
                acc += (rs @ prod).reshape(self._n_ring, k, nm).transpose(1, 0, 2)
        alm = np.zeros((maps.shape[0], n_coeffs(self.lmax)))
        r2 = np.sqrt(2.0)
        for l in range(self.lmax + 1):
            p = self._plm[l]  # (m, ring)
            alm[:, lm_index(l, 0)] = sc[:, :, 0] @ p[0]
            for m in range(1, l + 1):
                alm[:, lm_index(l, m)] = r2 * (sc[:, :, m] @ p[m])
                alm[:, lm_index(l, -m)] = r2 * (ss[:, :, m] @ p[m])
        alm *= self.weight
        return alm[0] if squeeze else alm

    def alm2map(self, alm):
        """Synthesis ``f_p = sum_lm a_lm Y_lm(p)``."""
        alm = np.asarray(alm, dtype=np.float64)
        squeeze = alm.ndim == 1
        alm = np.atleast_2d(alm)
        if alm.shape[1] != n_coeffs(self.lmax):
            raise ValueError("coefficient count does not match lmax")
        n_maps = alm.shape[0]
        A = np.zeros((n_maps, self.lmax + 1, self._n_ring))
        B = np.zeros_like(A)
        r2 = np.sqrt(2.0)
        for l in range(self.lmax + 1):
            p = self._plm[l]
            A[:, 0] += alm[:, [lm_index(l, 0)]] * p[0]
            for m in range(1, l + 1):
                A[:, m] += r2 * alm[:, [lm_index(l, m)]] * p[m]
                B[:, m] += r2 * alm[:, [lm_index(l, -m)]] * p[m]
        out = np.empty((n_maps, self._phi.size))
        for sl, cos, sin in self._chunks():
            ring = self.ring[sl]
            out[:, sl] = (np.einsum("kmp,pm->kp", A[:, :, ring], cos)
                          + np.einsum("kmp,pm->kp", B[:, :, ring], sin))
        return out[0] if squeeze else out


def cl_from_alm(alm, lmax):
    """``C_l = sum_m a_lm^2 / (2l + 1)`` for real coefficients."""
    alm = np.asarray(alm, dtype=np.float64)
    out = np.empty(alm.shape[:-1] + (lmax + 1,))
    for l in range(lmax + 1):
        sl = alm[..., l * l:(l + 1) * (l + 1)]
        out[..., l] = np.sum(sl * sl, axis=-1) / (2 * l + 1)
    return out
