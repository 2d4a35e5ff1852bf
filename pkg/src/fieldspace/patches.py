"""Per-token patches on a coarse HEALPix grid.

A token at patch zoom ``z_P`` owns ``4**(z - z_P)`` pixels of every finer
level ``z`` (its descendants, consecutive in nested order) and one value of
every coarser level (its ancestor). Gathering is a reshape or a repeat, so
the helpers accept numpy arrays and torch tensors alike.
"""
from dataclasses import dataclass

import numpy as np
import torch

from .healpix import check_level, npix


def n_pix_in_patch(z, z_patch):
    return 4 ** (z - z_patch) if z >= z_patch else 1


def patch_channels(levels, z_patch):
    return sum(n_pix_in_patch(z, z_patch) for z in levels)


def _repeat(x, k):
    if isinstance(x, torch.Tensor):
        return torch.repeat_interleave(x, k, dim=-1)
    return np.repeat(x, k, axis=-1)


def gather(values, z, z_patch):
    """``(..., npix(z))`` -> ``(..., npix(z_patch), n_pix_in_patch(z, z_patch))``."""
    if values.shape[-1] != npix(z):
        raise ValueError(f"level {z} needs {npix(z)} pixels, got {values.shape[-1]}")
    lead = tuple(values.shape[:-1])
    if z >= z_patch:
        return values.reshape(lead + (npix(z_patch), 4 ** (z - z_patch)))
    return _repeat(values, 4 ** (z_patch - z)).reshape(lead + (npix(z_patch), 1))


def scatter(tokens, z, z_patch):
    """Inverse of :func:`gather` for ``z >= z_patch``.

    For coarser ``z`` the per-token values are averaged back onto the
    ancestor pixels (the adjoint of the broadcast, normalised).
    """
    lead = tuple(tokens.shape[:-2])
    n_tok, c = tokens.shape[-2], tokens.shape[-1]
    if n_tok != npix(z_patch):
        raise ValueError(f"expected {npix(z_patch)} tokens, got {n_tok}")
    if c != n_pix_in_patch(z, z_patch):
        raise ValueError(f"level {z} at patch zoom {z_patch} needs "
                         f"{n_pix_in_patch(z, z_patch)} channels, got {c}")
    if z >= z_patch:
        return tokens.reshape(lead + (npix(z),))
    k = 4 ** (z_patch - z)
    return tokens.reshape(lead + (npix(z), k)).mean(-1)


@dataclass(frozen=True)
class PatchLayout:
    """Channel bookkeeping: ``ranges[i]`` is the slice of ``levels[i]``."""

    z_patch: int
    levels: tuple
    ranges: tuple

    @property
    def n_channels(self):
        return self.ranges[-1][1] if self.ranges else 0

    @property
    def n_tokens(self):
        return npix(self.z_patch)

    def slice_of(self, z):
        lo, hi = self.ranges[self.levels.index(z)]
        return slice(lo, hi)


def patch_layout(residual_levels, base_level, z_patch):
    """Descending residual levels first, the coarse mean last."""
    z_patch = check_level(z_patch)
    levels = tuple(sorted(residual_levels, reverse=True))
    if base_level is not None:
        levels = levels + (base_level,)
    ranges, lo = [], 0
    for z in levels:
        n = n_pix_in_patch(z, z_patch)
        ranges.append((lo, lo + n))
        lo += n
    return PatchLayout(z_patch, levels, tuple(ranges))


def build_patches(fields, layout):
    """Concatenate the gathered levels of ``fields`` (dict level -> array) on the channel axis."""
    missing = [z for z in layout.levels if z not in fields]
    if missing:
        raise KeyError(f"levels {missing} missing from state")
    parts = [gather(fields[z], z, layout.z_patch) for z in layout.levels]
    if isinstance(parts[0], torch.Tensor):
        return torch.cat(parts, dim=-1)
    return np.concatenate(parts, axis=-1)


def split_patches(tokens, layout, levels=None):
    """Scatter selected channel blocks of ``tokens`` back to per-level fields."""
    levels = layout.levels if levels is None else levels
    return {z: scatter(tokens[..., layout.slice_of(z)], z, layout.z_patch) for z in levels}
