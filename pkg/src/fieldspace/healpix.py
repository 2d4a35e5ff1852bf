"""HEALPix nested-scheme geometry.

Only the nested ordering is supported. Pixels at zoom level ``z`` have
``nside = 2**z`` and there are ``12 * 4**z`` of them; the four children of
pixel ``p`` are ``4p .. 4p+3`` one level down.

Angles follow the physics convention: ``theta`` is colatitude in [0, pi],
``phi`` is longitude in [0, 2 pi).
"""
from functools import lru_cache

import numpy as np

MAX_LEVEL = 29

# base-face ring and longitude offsets (Gorski et al. 2005 layout)
_JRLL = np.array([2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4], dtype=np.int64)
_JPLL = np.array([1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7], dtype=np.int64)


def check_level(z):
    """Validate a zoom level and return it as ``int``."""
    if isinstance(z, (bool, np.bool_)) or int(z) != z:
        raise TypeError(f"zoom level must be an integer, got {z!r}")
    z = int(z)
    if not 0 <= z <= MAX_LEVEL:
        raise ValueError(f"zoom level must be in [0, {MAX_LEVEL}], got {z}")
    return z


def nside(z):
    return 1 << check_level(z)


def npix(z):
    """Number of pixels at zoom level ``z`` (``12 * 4**z``)."""
    return 12 << (2 * check_level(z))


def level_from_npix(n):
    """Inverse of :func:`npix`; raises ``ValueError`` for non-HEALPix sizes."""
    n = int(n)
    q, rem = divmod(n, 12)
    z = (q.bit_length() - 1) // 2
    if rem or q < 1 or q != 1 << (2 * z):
        raise ValueError(f"{n} is not a valid HEALPix pixel count")
    return check_level(z)


def _check_pix(pix, z):
    pix = np.asarray(pix)
    if not np.issubdtype(pix.dtype, np.integer):
        raise TypeError("pixel indices must be integers")
    pix = pix.astype(np.int64)
    if np.any(pix < 0) or np.any(pix >= npix(z)):
        raise ValueError(f"pixel index out of range for level {z}")
    return pix


def parent(pix, z):
    """Parent pixel(s) at level ``z - 1``."""
    z = check_level(z)
    if z == 0:
        raise ValueError("level-0 pixels have no parent")
    return _check_pix(pix, z) >> 2


def children(pix, z):
    """The four children at level ``z + 1``, shape ``(..., 4)``."""
    z = check_level(z)
    check_level(z + 1)
    pix = _check_pix(pix, z)
    return (pix[..., None] << 2) + np.arange(4, dtype=np.int64)


def ancestor(pix, z, z_target):
    """Ancestor of ``pix`` (at level ``z``) at the coarser level ``z_target``."""
    if z_target > z:
        raise ValueError("z_target must not exceed z")
    return _check_pix(pix, z) >> (2 * (z - z_target))


def _compress_bits(v):
    # keep every other bit: inverse of _spread_bits
    v = v & 0x5555555555555555
    v = (v | (v >> 1)) & 0x3333333333333333
    v = (v | (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v | (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v | (v >> 16)) & 0x00000000FFFFFFFF
    return v


def _spread_bits(v):
    v = v & 0x00000000FFFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


def nest2xyf(pix, z):
    """Split nested indices into (x, y, face) coordinates."""
    z = check_level(z)
    pix = _check_pix(pix, z)
    face = pix >> (2 * z)
    ipf = pix & ((1 << (2 * z)) - 1)
    return _compress_bits(ipf), _compress_bits(ipf >> 1), face


def xyf2nest(x, y, face, z):
    z = check_level(z)
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    face = np.asarray(face, dtype=np.int64)
    return (face << (2 * z)) + _spread_bits(x) + (_spread_bits(y) << 1)


def _ring_geometry(pix, z):
    """Ring number ``jr`` (1..4 nside-1), points per quarter ring ``nr``,
    longitude index ``jp`` and the half-pixel ``kshift`` of each pixel."""
    ns = nside(z)
    x, y, face = nest2xyf(pix, z)
    jr = _JRLL[face] * ns - x - y - 1
    nr = np.where(jr < ns, jr, np.where(jr > 3 * ns, 4 * ns - jr, ns))
    kshift = np.where((jr >= ns) & (jr <= 3 * ns), (jr - ns) & 1, 0)
    jp = (_JPLL[face] * nr + x - y + 1 + kshift) // 2
    jp = np.where(jp > 4 * ns, jp - 4 * ns, jp)
    jp = np.where(jp < 1, jp + 4 * ns, jp)
    return jr, nr, jp, kshift


def pix2ang(pix, z):
    """Colatitude and longitude (radians) of nested pixel centers."""
    z = check_level(z)
    ns = nside(z)
    jr, nr, jp, kshift = _ring_geometry(pix, z)
    jr = jr.astype(np.float64)
    nr_f = nr.astype(np.float64)
    theta = np.empty(jr.shape, dtype=np.float64)

    north = jr < ns
    south = jr > 3 * ns
    equ = ~(north | south)
    # polar caps: 1 - cos(theta) = nr^2 / (3 nside^2); use the half-angle form
    s = nr_f / (ns * np.sqrt(6.0))
    theta[north] = 2.0 * np.arcsin(s[north])
    theta[south] = np.pi - 2.0 * np.arcsin(s[south])
    theta[equ] = np.arccos((2 * ns - jr[equ]) * 2.0 / (3.0 * ns))

    phi = (jp - (kshift + 1) * 0.5) * (0.5 * np.pi / nr_f)
    return theta, phi


def ang2pix(z, theta, phi):
    """Nested pixel index containing each (theta, phi) point."""
    z = check_level(z)
    ns = nside(z)
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    theta, phi = np.broadcast_arrays(theta, phi)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(phi))):
        raise ValueError("angles must be finite")
    if np.any(theta < 0) or np.any(theta > np.pi):
        raise ValueError("colatitude must lie in [0, pi]")
    if np.any(phi < -2 * np.pi) or np.any(phi > 4 * np.pi):
        raise ValueError("longitude out of range")

    cz = np.cos(theta)
    za = np.abs(cz)
    tt = np.mod(phi, 2 * np.pi) * (2.0 / np.pi)
    tt = np.where(tt >= 4.0, 0.0, tt)

    pix = np.empty(theta.shape, dtype=np.int64)

    eq = za <= 2.0 / 3.0
    if np.any(eq):
        t1 = ns * (0.5 + tt[eq])
        t2 = ns * (cz[eq] * 0.75)
        jp = (t1 - t2).astype(np.int64)
        jm = (t1 + t2).astype(np.int64)
        ifp = jp >> z
        ifm = jm >> z
        face = np.where(ifp == ifm, ifp | 4, np.where(ifp < ifm, ifp, ifm + 8))
        ix = jm & (ns - 1)
        iy = ns - (jp & (ns - 1)) - 1
        pix[eq] = xyf2nest(ix, iy, face, z)

    pol = ~eq
    if np.any(pol):
        ttp = tt[pol]
        ntt = np.minimum(ttp.astype(np.int64), 3)
        tp = ttp - ntt
        # sqrt(3 (1 - |cos|)) written via sin(theta/2) / cos(theta/2) for accuracy
        th = theta[pol]
        half = np.where(cz[pol] >= 0, np.sin(0.5 * th), np.cos(0.5 * th))
        tmp = ns * np.sqrt(6.0) * half
        jp = np.minimum((tp * tmp).astype(np.int64), ns - 1)
        jm = np.minimum(((1.0 - tp) * tmp).astype(np.int64), ns - 1)
        north = cz[pol] >= 0
        face = np.where(north, ntt, ntt + 8)
        ix = np.where(north, ns - jm - 1, jp)
        iy = np.where(north, ns - jp - 1, jm)
        pix[pol] = xyf2nest(ix, iy, face, z)
    return pix


@lru_cache(maxsize=16)
def _centers(z):
    theta, phi = pix2ang(np.arange(npix(z)), z)
    theta.setflags(write=False)
    phi.setflags(write=False)
    return theta, phi


def pixel_centers(z):
    """Cached ``(theta, phi)`` of every pixel center at level ``z`` (read-only)."""
    return _centers(check_level(z))


def ring_index(z):
    """Ring number (0-based, north to south) of every pixel at level ``z``."""
    jr, _, _, _ = _ring_geometry(np.arange(npix(z)), z)
    return jr - 1


def great_circle(theta1, phi1, theta2, phi2):
    """Great-circle distance in radians between points given in colatitude/longitude.

    Uses the Vincenty form, which stays accurate for both tiny and
    near-antipodal separations.
    """
    lat1 = 0.5 * np.pi - np.asarray(theta1, dtype=np.float64)
    lat2 = 0.5 * np.pi - np.asarray(theta2, dtype=np.float64)
    dlon = np.asarray(phi2, dtype=np.float64) - np.asarray(phi1, dtype=np.float64)
    s1, c1 = np.sin(lat1), np.cos(lat1)
    s2, c2 = np.sin(lat2), np.cos(lat2)
    sd, cd = np.sin(dlon), np.cos(dlon)
    num = np.hypot(c2 * sd, c1 * s2 - s1 * c2 * cd)
    den = s1 * s2 + c1 * c2 * cd
    return np.arctan2(num, den)


def ang2vec(theta, phi):
    """Unit vectors, shape ``(..., 3)``."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)
