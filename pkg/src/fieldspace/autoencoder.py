"""Field-Space Autoencoder on nested HEALPix fields.

The network never leaves field space: every block reads per-token patches
of the current level set and writes fields back. Encoding removes the finest
residual level once per stage until a single-feature code at the bottleneck
level remains; decoding adds levels back one at a time. The coarse base is
never modified and is stored verbatim next to the code.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .healpix import check_level, level_from_npix, npix, pixel_centers
from .multiscale import broadcast, check_ladder, decompose, downsample_avg, group_level, mask_residuals
from .nn import Adam, Linear, MultiHeadAttention, LayerNorm, TransformerLayer, lr_schedule
from .patches import (build_patches, n_pix_in_patch, patch_channels, patch_layout, scatter)
from .sph import n_coeffs, real_sph_harm
from .validation import check_fields

log = logging.getLogger(__name__)

MAX_PATCH_SPAN = 5


def patch_zoom(base_level, top_level):
    """Token grid for a block whose finest level is ``top_level``.

    Caps the per-token channel count of the finest level at ``4**5``.
    """
    return max(base_level, top_level - MAX_PATCH_SPAN)


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    stage: str
    levels_in: tuple
    levels_out: tuple
    z_patch: int
    c_in: int
    c_out: int


def block_plan(base_level, residual_levels, bottleneck_level, n_attention=2, n_bottleneck=2):
    """Shape plan of every block, encoder first, without allocating weights."""
    levels = check_ladder(base_level, residual_levels)
    zb = check_level(bottleneck_level)
    if zb <= base_level:
        raise ValueError("bottleneck level must be finer than the base level")
    if zb > levels[0]:
        raise ValueError("bottleneck level must not exceed the lowest residual level")
    n_stages = levels[-1] - zb
    if n_stages < 1:
        raise ValueError("need at least one compression stage")

    plan = []
    cur = tuple(levels)

    def attention(stage):
        zp = patch_zoom(base_level, max(cur))
        plan.append(BlockSpec("attention", stage, cur, cur, zp,
                              patch_channels(cur + (base_level,), zp), patch_channels(cur, zp)))

    for _ in range(n_stages):
        for _ in range(n_attention):
            attention("encoder")
        top = max(cur)
        zp = patch_zoom(base_level, top)
        out = tuple(sorted(set(cur) - {top} | {top - 1}))
        plan.append(BlockSpec("compress", "encoder", cur, out, zp,
                              patch_channels(cur + (base_level,), zp),
                              n_pix_in_patch(top - 1, zp)))
        cur = out
    if cur != (zb,):
        raise ValueError(f"encoder ends with levels {cur}, expected only the bottleneck {zb}")
    for _ in range(n_bottleneck):
        attention("bottleneck")
    for _ in range(n_bottleneck):
        attention("bottleneck")
    for _ in range(n_stages):
        for _ in range(n_attention):
            attention("decoder")
        top = max(cur)
        zp = patch_zoom(base_level, top)
        out = cur + (top + 1,)
        plan.append(BlockSpec("decompress", "decoder", cur, out, zp,
                              patch_channels(cur + (base_level,), zp),
                              n_pix_in_patch(top + 1, zp)))
        cur = out
    return plan


@dataclass
class CompressedState:
    """Stored base mean plus the single-feature code; arrays may be batched."""

    base: np.ndarray
    base_level: int
    code: np.ndarray
    code_level: int
    top_level: int

    @property
    def nominal_ratio(self):
        return 4 ** (self.top_level - self.code_level)

    @property
    def effective_ratio(self):
        return npix(self.top_level) / (npix(self.code_level) + npix(self.base_level))


def compression_ratios(top_level, code_level, base_level):
    """(nominal, effective) compression ratio of a configuration."""
    return (4 ** (top_level - code_level),
            npix(top_level) / (npix(code_level) + npix(base_level)))


# torch versions of the multiscale helpers (last-axis, batched)

def t_downsample(x, z, z_target):
    if z_target == z:
        return x
    return x.reshape(x.shape[:-1] + (npix(z_target), 4 ** (z - z_target))).mean(-1)


def t_broadcast(x, z, z_target):
    if z_target == z:
        return x
    return torch.repeat_interleave(x, 4 ** (z_target - z), dim=-1)


def t_scale_conserve(r, z, z_group):
    return r - t_broadcast(t_downsample(r, z, z_group), z_group, z)


@lru_cache(maxsize=32)
def sh_basis(z_tok, degree, z_emb=3):
    """Real harmonics up to ``degree`` at the level-``z_emb`` centers, moved to tokens.

    Finer token grids inherit their ancestor's row; coarser ones average
    their descendants' rows. Shape ``(npix(z_tok), (degree+1)**2)``.
    """
    if degree < 0:
        raise ValueError("embedding degree must be non-negative")
    Y = real_sph_harm(degree, *pixel_centers(z_emb))
    if z_tok >= z_emb:
        Y = np.repeat(Y, 4 ** (z_tok - z_emb), axis=0)
    else:
        Y = Y.reshape(npix(z_tok), 4 ** (z_emb - z_tok), -1).mean(axis=1)
    Y.setflags(write=False)
    return Y


def sh_position_embedding(z_tok, degree, lift, z_emb=3):
    """Learned lift of the harmonic basis: ``(tokens, d_model)``."""
    basis = torch.as_tensor(np.array(sh_basis(z_tok, degree, z_emb)), dtype=lift.dtype)
    return basis @ lift.transpose(0, 1)


class FieldAttentionBlock(nn.Module):
    """Transformer layer on patch tokens; its update is written back to the residual fields.

    The base level is read but never written. The field update is the
    projected *change* of the token features, so zeroed attention and
    feed-forward output weights make the block an exact identity.
    """

    def __init__(self, spec, base_level, d_model, n_heads, sh_degree=8, sh_level=3,
                 generator=None):
        super().__init__()
        self.spec = spec
        self.base_level = base_level
        self.layout = patch_layout(spec.levels_in, base_level, spec.z_patch)
        self.out_layout = patch_layout(spec.levels_in, None, spec.z_patch)
        self.sh_degree = sh_degree
        self.sh_level = sh_level
        self.lift = Linear(spec.c_in, d_model, generator=generator)
        self.pos = Linear(n_coeffs(sh_degree), d_model, bias=False, generator=generator)
        self.layer = TransformerLayer(d_model, n_heads, zero_out=True, generator=generator)
        self.proj = Linear(d_model, spec.c_out, generator=generator)

    def forward(self, fields):
        P = build_patches(fields, self.layout)
        h = self.lift(P) + sh_position_embedding(self.spec.z_patch, self.sh_degree,
                                                 self.pos.weight, self.sh_level)
        delta = self.proj(self.layer(h) - h)
        out = dict(fields)
        for z in self.spec.levels_in:
            out[z] = fields[z] + scatter(delta[..., self.out_layout.slice_of(z)], z,
                                         self.spec.z_patch)
        return out


class FieldCompressBlock(nn.Module):
    """Shared per-patch linear map onto the next-coarser residual level.

    Warm start: every output pixel is its own level's input value (when that
    level is present) plus the mean of its four children at the finest level.
    """

    def __init__(self, spec, base_level, generator=None):
        super().__init__()
        self.spec = spec
        self.layout = patch_layout(spec.levels_in, base_level, spec.z_patch)
        self.map = Linear(spec.c_in, spec.c_out, init="zeros")
        self.top = max(spec.levels_in)
        self.target = self.top - 1
        with torch.no_grad():
            W = self.map.weight
            top = self.layout.slice_of(self.top)
            for q in range(spec.c_out):
                W[q, top.start + 4 * q: top.start + 4 * q + 4] = 0.25
            if self.target in self.layout.levels:
                s = self.layout.slice_of(self.target)
                W[torch.arange(spec.c_out), s.start + torch.arange(spec.c_out)] += 1.0

    def forward(self, fields):
        H = self.map(build_patches(fields, self.layout))
        out = {z: f for z, f in fields.items() if z not in (self.top, self.target)}
        out[self.target] = scatter(H, self.target, self.spec.z_patch)
        return out


class FieldDecompressBlock(nn.Module):
    """Shared per-patch linear map producing the next-finer residual level (zero init)."""

    def __init__(self, spec, base_level, generator=None):
        super().__init__()
        self.spec = spec
        self.layout = patch_layout(spec.levels_in, base_level, spec.z_patch)
        self.map = Linear(spec.c_in, spec.c_out, init="zeros")
        self.target = max(spec.levels_in) + 1

    def forward(self, fields):
        out = dict(fields)
        out[self.target] = scatter(self.map(build_patches(fields, self.layout)),
                                   self.target, self.spec.z_patch)
        return out


def _make_block(spec, base_level, d_model, n_heads, sh_degree, sh_level, generator):
    if spec.kind == "attention":
        return FieldAttentionBlock(spec, base_level, d_model, n_heads, sh_degree, sh_level,
                                   generator)
    if spec.kind == "compress":
        return FieldCompressBlock(spec, base_level, generator)
    return FieldDecompressBlock(spec, base_level, generator)


class FieldSpaceAE(nn.Module):
    """The network. Inputs and outputs are dicts ``level -> (batch, npix)`` tensors."""

    def __init__(self, base_level, residual_levels, bottleneck_level, d_model=512, d_head=16,
                 sh_degree=8, sh_level=3, n_attention=2, n_bottleneck=2, seed=0):
        super().__init__()
        if d_model % d_head:
            raise ValueError("d_model must be divisible by d_head")
        self.base_level = base_level
        self.residual_levels = tuple(sorted(residual_levels))
        self.bottleneck_level = bottleneck_level
        self.top_level = self.residual_levels[-1]
        self.plan = block_plan(base_level, residual_levels, bottleneck_level,
                               n_attention, n_bottleneck)
        g = torch.Generator().manual_seed(int(seed))
        blocks = [_make_block(s, base_level, d_model, d_model // d_head, sh_degree, sh_level, g)
                  for s in self.plan]
        n_enc = len(self.plan) - sum(1 for s in self.plan if s.stage == "decoder") - n_bottleneck
        self.encoder = nn.ModuleList(blocks[:n_enc])
        self.decoder = nn.ModuleList(blocks[n_enc:])

    def encode_fields(self, fields):
        for blk in self.encoder:
            fields = blk(fields)
        return fields

    def decode_fields(self, fields):
        for blk in self.decoder:
            fields = blk(fields)
        return fields

    def assemble(self, fields):
        """Scale-conserve each decoded residual and sum everything at the top level."""
        top = self.top_level
        out = t_broadcast(fields[self.base_level], self.base_level, top)
        for z in self.residual_levels:
            r = t_scale_conserve(fields[z], z, group_level(self.base_level, self.residual_levels, z))
            out = out + t_broadcast(r, z, top)
        return out

    def forward(self, fields):
        return self.assemble(self.decode_fields(self.encode_fields(fields)))


def state_to_tensors(state, dtype=torch.float32):
    fields = {z: torch.as_tensor(r, dtype=dtype) for z, r in state.residuals.items()}
    fields[state.base_level] = torch.as_tensor(state.base, dtype=dtype)
    return fields


def rmse_loss(pred, target):
    return torch.sqrt(torch.mean((pred.double() - target.double()) ** 2))


def _take(tree, idx):
    if isinstance(tree, dict):
        return {k: _take(v, idx) for k, v in tree.items()}
    return tree[idx]


def train_model(model, fields, target, learning_rate, warmup_iters, max_iters, batch_size,
                seed=0, callback=None, loss_fn=rmse_loss, params=None):
    """Adam + warm-up/cosine schedule on an RMSE reconstruction loss.

    ``fields`` maps level -> ``(n, npix)`` tensors, ``target`` is ``(n, npix_top)``
    (or any structure ``loss_fn`` accepts via ``target[idx]``). Returns the
    per-iteration loss history. A non-finite loss raises ``FloatingPointError``.
    """
    params = list(model.parameters()) if params is None else list(params)
    opt = Adam(params)
    n = target.shape[0]
    rng = np.random.default_rng(seed)
    history = []
    for it in range(1, max_iters + 1):
        if n <= batch_size:
            idx = slice(None)
        else:
            idx = torch.as_tensor(np.sort(rng.choice(n, batch_size, replace=False)))
        batch = _take(fields, idx)
        opt.zero_grad()
        loss = loss_fn(model(batch), target[idx])
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss.item()} at iteration {it}")
        loss.backward()
        opt.step(lr_schedule(it, learning_rate, warmup_iters, max_iters))
        history.append(loss.item())
        if callback is not None:
            callback(it, history[-1])
    return history


def desk_params(**overrides):
    """Desk-scale configuration: levels shifted down by three, small model."""
    p = dict(base_level=0, residual_levels=(3, 4, 5), bottleneck_level=3, d_model=64,
             d_head=16, sh_degree=8, sh_level=3, learning_rate=1e-3, warmup_iters=100,
             max_iters=2000, batch_size=8)
    p.update(overrides)
    return p


def paper_params(ratio=64, **overrides):
    """Full-resolution configuration for compression ratio 16, 64, 256 or 1024."""
    zb = {16: 6, 64: 5, 256: 4, 1024: 3}
    if ratio not in zb:
        raise ValueError("ratio must be one of 16, 64, 256, 1024")
    p = dict(base_level=1 if ratio == 1024 else 3, residual_levels=(6, 7, 8),
             bottleneck_level=zb[ratio], d_model=512, d_head=16, sh_degree=8, sh_level=3,
             learning_rate=1e-3, warmup_iters=2000, max_iters=30000, batch_size=8)
    p.update(overrides)
    return p


class FieldSpaceAutoencoder(TransformerMixin, BaseEstimator):
    """Compress normalised HEALPix fields to a base mean plus a single-feature code.

    ``fit`` takes ``(n_samples, npix(top))`` fields. ``transform`` returns rows
    ``[base | code]``; ``inverse_transform`` decodes them.

    Parameters
    ----------
    base_level, residual_levels : int, tuple of int
        Multi-scale ladder; the input level is ``max(residual_levels)``.
    bottleneck_level : int
        Level of the code; compression ratio is ``4**(top - bottleneck_level)``.
    d_model, d_head : int
        Token width and attention head width.
    sh_degree, sh_level : int
        Harmonic position embedding degree and the level it is evaluated at.
    n_attention, n_bottleneck : int
        Attention blocks per stage and on each side of the bottleneck.
    learning_rate, warmup_iters, max_iters, batch_size : training schedule.
    random_state : int
    """

    def __init__(self, base_level=3, residual_levels=(6, 7, 8), bottleneck_level=5,
                 d_model=512, d_head=16, sh_degree=8, sh_level=3, n_attention=2,
                 n_bottleneck=2, learning_rate=1e-3, warmup_iters=2000, max_iters=30000,
                 batch_size=8, random_state=0, verbose=0):
        self.base_level = base_level
        self.residual_levels = residual_levels
        self.bottleneck_level = bottleneck_level
        self.d_model = d_model
        self.d_head = d_head
        self.sh_degree = sh_degree
        self.sh_level = sh_level
        self.n_attention = n_attention
        self.n_bottleneck = n_bottleneck
        self.learning_rate = learning_rate
        self.warmup_iters = warmup_iters
        self.max_iters = max_iters
        self.batch_size = batch_size
        self.random_state = random_state
        self.verbose = verbose

    @property
    def top_level(self):
        return max(self.residual_levels)

    def build(self):
        """Create an untrained network (``model_``) without fitting."""
        self.levels_ = check_ladder(self.base_level, self.residual_levels)
        self.model_ = FieldSpaceAE(self.base_level, self.levels_, self.bottleneck_level,
                                   self.d_model, self.d_head, self.sh_degree, self.sh_level,
                                   self.n_attention, self.n_bottleneck, seed=self.random_state)
        self.n_features_in_ = npix(self.top_level)
        self.history_ = []
        return self

    def _fields(self, X, mask_levels=()):
        state = decompose(X, self.base_level, self.levels_)
        if mask_levels:
            state = mask_residuals(state, mask_levels)
        return state_to_tensors(state)

    def fit(self, X, y=None, callback=None):
        X = check_fields(X, level=self.top_level)
        self.build()
        torch.manual_seed(self.random_state)

        def report(it, loss):
            if self.verbose and (it % max(1, self.max_iters // 20) == 0 or it == 1):
                log.info("iter %d loss %.6g", it, loss)
            if callback is not None:
                callback(it, loss)

        self.history_ = train_model(
            self.model_, self._fields(X), torch.as_tensor(X, dtype=torch.float32),
            self.learning_rate, self.warmup_iters, self.max_iters, self.batch_size,
            seed=self.random_state, callback=report)
        return self

    @torch.no_grad()
    def encode(self, X, mask_levels=()):
        """Encode fields; ``mask_levels`` zeroes those residuals first (zero-shot SR)."""
        check_is_fitted(self, "model_")
        X = check_fields(X, level=self.top_level, allow_1d=True)
        fields = self._fields(X, mask_levels)
        base = fields[self.base_level].double().numpy()
        out = self.model_.encode_fields(fields)
        return CompressedState(base, self.base_level,
                               out[self.bottleneck_level].double().numpy(),
                               self.bottleneck_level, self.top_level)

    @torch.no_grad()
    def decode(self, state):
        check_is_fitted(self, "model_")
        fields = {self.base_level: torch.as_tensor(state.base, dtype=torch.float32),
                  self.bottleneck_level: torch.as_tensor(state.code, dtype=torch.float32)}
        return self.model_.assemble(self.model_.decode_fields(fields)).double().numpy()

    def reconstruct(self, X, mask_levels=()):
        return self.decode(self.encode(X, mask_levels))

    def super_resolve(self, X_coarse):
        """Decode coarse fields onto the top level by masking the missing residuals.

        ``X_coarse`` is at any level between the lowest residual level and the
        top; its values are broadcast up and the finer residuals zeroed.
        """
        X_coarse = check_fields(X_coarse, allow_1d=True)
        z_in = level_from_npix(X_coarse.shape[1])
        if not self.levels_[0] <= z_in <= self.top_level:
            raise ValueError(f"input level {z_in} outside the residual ladder {self.levels_}")
        X = broadcast(X_coarse, self.top_level, z_in)
        return self.reconstruct(X, mask_levels=tuple(range(z_in + 1, self.top_level + 1)))

    def transform(self, X):
        s = self.encode(X)
        return np.concatenate([s.base, s.code], axis=-1)

    def inverse_transform(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        nb = npix(self.base_level)
        if Z.shape[1] != nb + npix(self.bottleneck_level):
            raise ValueError("row length does not match base + code sizes")
        return self.decode(CompressedState(Z[:, :nb], self.base_level, Z[:, nb:],
                                           self.bottleneck_level, self.top_level))

    def baseline(self, X):
        """Zero-weight reference: the base mean broadcast to the top level."""
        X = check_fields(X, level=self.top_level, allow_1d=True)
        return broadcast(downsample_avg(X, self.base_level), self.top_level)


class CrossVariableBlock(nn.Module):
    """Attention across the variable axis at every bottleneck token.

    Each variable has its own lift and projection; the projection starts at
    zero so the block is the identity before fine-tuning.
    """

    def __init__(self, variables, code_level, base_level, d_model, n_heads, generator=None):
        super().__init__()
        self.variables = tuple(variables)
        self.code_level = code_level
        self.z_patch = patch_zoom(base_level, code_level)
        self.layout = patch_layout((code_level,), base_level, self.z_patch)
        c_in = self.layout.n_channels
        c_out = n_pix_in_patch(code_level, self.z_patch)
        self.lift = nn.ModuleDict({v: Linear(c_in, d_model, generator=generator)
                                   for v in self.variables})
        self.norm = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, generator=generator)
        self.proj = nn.ModuleDict({v: Linear(d_model, c_out, init="zeros")
                                   for v in self.variables})

    def forward(self, states):
        if tuple(states) != self.variables:
            raise ValueError(f"expected variables {self.variables}, got {tuple(states)}")
        h = torch.stack([self.lift[v](build_patches(states[v], self.layout))
                         for v in self.variables], dim=-2)  # (..., tokens, V, d)
        upd = self.attn(self.norm(h))
        out = {}
        for i, v in enumerate(self.variables):
            f = dict(states[v])
            f[self.code_level] = f[self.code_level] + scatter(
                self.proj[v](upd[..., i, :]), self.code_level, self.z_patch)
            out[v] = f
        return out


class MultiVariableAE(nn.Module):
    """Per-variable autoencoders joined by cross-variable attention at the bottleneck."""

    def __init__(self, models, d_model=64, n_heads=4, seed=0):
        super().__init__()
        self.variables = tuple(models)
        first = models[self.variables[0]]
        for v, m in models.items():
            if (m.bottleneck_level, m.base_level, m.top_level) != (
                    first.bottleneck_level, first.base_level, first.top_level):
                raise ValueError(f"variable {v!r} has an inconsistent level layout")
        self.models = nn.ModuleDict(models)
        g = torch.Generator().manual_seed(int(seed))
        args = (self.variables, first.bottleneck_level, first.base_level, d_model, n_heads, g)
        self.cross_enc = CrossVariableBlock(*args)
        self.cross_dec = CrossVariableBlock(*args)

    def encode_fields(self, states):
        return self.cross_enc({v: self.models[v].encode_fields(states[v]) for v in self.variables})

    def decode_fields(self, states):
        states = self.cross_dec(states)
        return {v: self.models[v].decode_fields(states[v]) for v in self.variables}

    def forward(self, states):
        dec = self.decode_fields(self.encode_fields(states))
        return torch.stack([self.models[v].assemble(dec[v]) for v in self.variables], dim=1)


class MultiVariableAutoencoder(BaseEstimator):
    """Fine-tune cross-variable attention on top of pre-trained single-variable models.

    ``fit`` takes ``(n_samples, n_variables, npix)``. With ``freeze=True``
    only the cross-variable layers are trained.
    """

    def __init__(self, estimators=None, d_model=64, d_head=16, freeze=True, learning_rate=1e-3,
                 warmup_iters=100, max_iters=1000, batch_size=8, random_state=0):
        self.estimators = estimators
        self.d_model = d_model
        self.d_head = d_head
        self.freeze = freeze
        self.learning_rate = learning_rate
        self.warmup_iters = warmup_iters
        self.max_iters = max_iters
        self.batch_size = batch_size
        self.random_state = random_state

    def _states(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1] != len(self.variables_):
            raise ValueError("expected (n_samples, n_variables, npix)")
        return {v: self.estimators[v]._fields(X[:, i]) for i, v in enumerate(self.variables_)}

    def fit(self, X, y=None):
        self.variables_ = tuple(self.estimators)
        self.model_ = MultiVariableAE({v: e.model_ for v, e in self.estimators.items()},
                                      self.d_model, self.d_model // self.d_head,
                                      seed=self.random_state)
        params = list(self.model_.cross_enc.parameters()) + list(self.model_.cross_dec.parameters())
        if not self.freeze:
            params += list(self.model_.models.parameters())
        self.history_ = train_model(
            self.model_, self._states(X), torch.as_tensor(np.asarray(X), dtype=torch.float32),
            self.learning_rate, self.warmup_iters, self.max_iters, self.batch_size,
            seed=self.random_state, params=params)
        return self

    @torch.no_grad()
    def reconstruct(self, X):
        check_is_fitted(self, "model_")
        return self.model_(self._states(X)).double().numpy()

