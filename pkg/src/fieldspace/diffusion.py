"""Compressed-field diffusion: cosine schedule, v-prediction and DDIM sampling.

The base mean and the code are two separately noised components that share
one diffusion step ``t``. A window of consecutive days is denoised jointly by
an attention backbone working along the variable, token and time axes.
"""
import datetime as dt
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .autoencoder import patch_zoom, sh_basis, train_model
from .healpix import check_level, level_from_npix, npix
from .nn import FeedForward, LayerNorm, Linear, MultiHeadAttention
from .patches import build_patches, patch_layout, scatter
from .sph import n_coeffs

log = logging.getLogger(__name__)

EPOCH = dt.date(1940, 1, 1)


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions ``alpha_bar[t]`` for ``t = 0 .. T``."""

    T: int
    alpha_bar: np.ndarray

    def coefficients(self, t):
        """``(sqrt(alpha_bar), sqrt(1 - alpha_bar))`` at step(s) ``t``."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"diffusion step outside [0, {self.T}]")
        ab = self.alpha_bar[t]
        return np.sqrt(ab), np.sqrt(1.0 - ab)


def cosine_schedule(T, s=0.008, max_beta=0.999):
    """Squared-cosine schedule with offset ``s``; per-step beta clipped at ``max_beta``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1.0 + s) * np.pi / 2) ** 2
    ratio = f[1:] / f[:-1]
    beta = np.minimum(1.0 - ratio, max_beta)
    ab = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    ab.setflags(write=False)
    return NoiseSchedule(int(T), ab)


def _coef(sched, t, x):
    a, b = sched.coefficients(t)
    if isinstance(x, torch.Tensor):
        a = torch.as_tensor(a, dtype=x.dtype)
        b = torch.as_tensor(b, dtype=x.dtype)
    if np.ndim(a):
        shape = (-1,) + (1,) * (x.ndim - 1)
        a, b = a.reshape(shape), b.reshape(shape)
    return a, b


def q_sample(x0, t, eps, sched):
    """``x_t = sqrt(ab) x0 + sqrt(1 - ab) eps``; an array ``t`` indexes axis 0."""
    a, b = _coef(sched, t, x0)
    return a * x0 + b * eps


def v_target(x0, eps, t, sched):
    """``v = sqrt(ab) eps - sqrt(1 - ab) x0``."""
    a, b = _coef(sched, t, x0)
    return a * eps - b * x0


def predict_x0(x_t, v, t, sched):
    a, b = _coef(sched, t, x_t)
    return a * x_t - b * v


def predict_eps(x_t, v, t, sched):
    a, b = _coef(sched, t, x_t)
    return b * x_t + a * v


def ddim_timesteps(T, n_steps):
    """Uniform-stride sub-schedule from ``T`` down to ``0`` (``n_steps + 1`` entries)."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in [1, {T}]")
    return np.unique(np.round(np.linspace(0, T, n_steps + 1)).astype(np.int64))[::-1]


def ddim_sample(model_fn, sched, shapes, n_steps=100, seed=0, dtype=np.float64):
    """Deterministic DDIM (eta = 0) with a v-predicting model.

    ``shapes`` maps component name -> array shape; ``model_fn(x, t)`` takes the
    dict of noisy components and the integer step and returns a dict of
    v-predictions. The initial noise depends only on ``seed``.
    """
    rng = np.random.default_rng(seed)
    x = {k: rng.standard_normal(s).astype(dtype) for k, s in shapes.items()}
    steps = ddim_timesteps(sched.T, n_steps)
    for t, s in zip(steps[:-1], steps[1:]):
        v = model_fn(x, int(t))
        a_s, b_s = sched.coefficients(int(s))
        new = {}
        for k in x:
            x0 = predict_x0(x[k], v[k], int(t), sched)
            eps = predict_eps(x[k], v[k], int(t), sched)
            new[k] = a_s * x0 + b_s * eps
        x = new
    return x


def sinusoidal(values, dim, max_period=10000.0):
    """Standard transformer sinusoid features, ``[sin | cos]`` halves."""
    values = np.asarray(values, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = values[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def timestamp_features(days, n_harmonics=4, epoch=EPOCH):
    """Day-of-year harmonics plus a normalised year scalar per timestamp.

    ``days`` are integer offsets from ``epoch`` (1940-01-01). Output has
    ``2 * n_harmonics + 1`` columns.
    """
    days = np.atleast_1d(np.asarray(days, dtype=np.int64))
    doy = np.empty(days.shape)
    year = np.empty(days.shape)
    for i, d in np.ndenumerate(days):
        date = epoch + dt.timedelta(days=int(d))
        doy[i] = date.timetuple().tm_yday - 1
        year[i] = date.year
    k = np.arange(1, n_harmonics + 1)
    ph = 2 * np.pi * doy[..., None] * k / 365.25
    return np.concatenate([np.sin(ph), np.cos(ph), ((year - 1940.0) / 100.0)[..., None]], axis=-1)


class StepEmbedder(nn.Module):
    def __init__(self, d_model, n_freq=64, generator=None):
        super().__init__()
        self.n_freq = n_freq
        self.fc1 = Linear(n_freq, d_model, generator=generator)
        self.fc2 = Linear(d_model, d_model, generator=generator)

    def forward(self, t, dtype=torch.float32):
        f = torch.as_tensor(sinusoidal(np.asarray(t), self.n_freq), dtype=dtype)
        return self.fc2(torch.nn.functional.gelu(self.fc1(f)))


class TimestampEmbedder(nn.Module):
    def __init__(self, d_model, n_harmonics=4, generator=None):
        super().__init__()
        self.n_harmonics = n_harmonics
        self.fc = Linear(2 * n_harmonics + 1, d_model, generator=generator)

    def forward(self, days, dtype=torch.float32):
        f = torch.as_tensor(timestamp_features(np.asarray(days), self.n_harmonics), dtype=dtype)
        return self.fc(f)


def embed_step(t, d_model, embedder=None):
    """Step embedding as a numpy vector (fresh deterministic embedder if none given)."""
    embedder = embedder or StepEmbedder(d_model, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        return embedder(np.asarray([t]), torch.float64 if embedder.fc1.weight.dtype == torch.float64
                        else torch.float32)[0].double().numpy()


def embed_timestamp(day, d_model, embedder=None):
    embedder = embedder or TimestampEmbedder(d_model, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        return embedder(np.asarray([day]))[0].double().numpy()


class AxisAttention(nn.Module):
    """Pre-norm residual self-attention along one axis of ``(B, W, V, N, d)``."""

    def __init__(self, d_model, n_heads, axis, generator=None):
        super().__init__()
        self.axis = axis
        self.norm = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, generator=generator)

    def forward(self, h):
        x = h.movedim(self.axis, -2)
        x = self.attn(self.norm(x)).movedim(-2, self.axis)
        return h + x


class BackboneBlock(nn.Module):
    def __init__(self, d_model, n_heads, generator=None):
        super().__init__()
        self.variable = AxisAttention(d_model, n_heads, 2, generator)
        self.spatial = AxisAttention(d_model, n_heads, 3, generator)
        self.temporal = AxisAttention(d_model, n_heads, 1, generator)
        self.norm = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, generator=generator)

    def forward(self, h):
        h = self.temporal(self.spatial(self.variable(h)))
        return h + self.ffn(self.norm(h))


class DiffusionBackbone(nn.Module):
    """v-prediction network over windows of compressed states.

    Inputs ``base`` ``(B, W, V, npix(base_level))`` and ``code``
    ``(B, W, V, npix(code_level))``; tokens live on the base grid (capped by
    the usual patch-span rule) and carry the code pixels as channels.
    """

    def __init__(self, n_variables, base_level, code_level, d_model=256, n_blocks=4, d_head=16,
                 sh_degree=8, sh_level=3, seed=0):
        super().__init__()
        if code_level <= base_level:
            raise ValueError("code level must be finer than the base level")
        g = torch.Generator().manual_seed(int(seed))
        self.base_level = check_level(base_level)
        self.code_level = check_level(code_level)
        self.z_patch = patch_zoom(base_level, code_level)
        self.layout = patch_layout((code_level,), base_level, self.z_patch)
        c = self.layout.n_channels
        self.n_variables = n_variables
        self.sh_degree, self.sh_level = sh_degree, sh_level
        self.lift = Linear(c, d_model, generator=g)
        self.grid = Linear(n_coeffs(sh_degree), d_model, bias=False, generator=g)
        self.var_embed = nn.Parameter(torch.randn(n_variables, d_model, generator=g) * 0.02)
        self.time_embed = TimestampEmbedder(d_model, generator=g)
        self.step_embed = StepEmbedder(d_model, generator=g)
        self.blocks = nn.ModuleList([BackboneBlock(d_model, d_model // d_head, g)
                                     for _ in range(n_blocks)])
        self.norm = LayerNorm(d_model)
        self.head = Linear(d_model, c, init="zeros")
        self.register_buffer("sh", torch.as_tensor(
            np.array(sh_basis(self.z_patch, sh_degree, sh_level)), dtype=torch.float32))

    def forward(self, base, code, t, days, var_embed=None):
        fields = {self.base_level: base, self.code_level: code}
        P = build_patches(fields, self.layout)  # (B, W, V, N, C)
        ve = self.var_embed if var_embed is None else var_embed
        h = (self.lift(P)
             + (self.sh.to(P.dtype) @ self.grid.weight.transpose(0, 1))
             + ve[:, None, :]
             + self.time_embed(days, P.dtype)[:, :, None, None, :]
             + self.step_embed(np.asarray(t), P.dtype)[:, None, None, None, :])
        for blk in self.blocks:
            h = blk(h)
        out = self.head(self.norm(h))
        return (scatter(out[..., self.layout.slice_of(self.base_level)], self.base_level,
                        self.z_patch),
                scatter(out[..., self.layout.slice_of(self.code_level)], self.code_level,
                        self.z_patch))


def make_windows(series_len, window):
    """Start indices of all full sliding windows over a series."""
    return np.arange(max(0, series_len - window + 1))


class CompressedFieldDiffusion(BaseEstimator):
    """Generative model of windows of compressed states (base mean + code).

    ``fit(base, code, days)`` takes ``base`` ``(members, time, V, npix_b)``,
    ``code`` ``(members, time, V, npix_c)`` and integer ``days`` ``(time,)``
    (offsets from 1940-01-01). Components are standardised per variable before
    diffusion. ``sample`` draws new windows conditioned on timestamps only.
    """

    def __init__(self, window=8, d_model=256, n_blocks=4, d_head=16, n_diffusion_steps=1000,
                 sample_steps=100, learning_rate=1e-3, warmup_iters=5000, max_iters=100000,
                 batch_size=16, base_weight=1.0, sh_degree=8, sh_level=3, random_state=0):
        self.window = window
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.d_head = d_head
        self.n_diffusion_steps = n_diffusion_steps
        self.sample_steps = sample_steps
        self.learning_rate = learning_rate
        self.warmup_iters = warmup_iters
        self.max_iters = max_iters
        self.batch_size = batch_size
        self.base_weight = base_weight
        self.sh_degree = sh_degree
        self.sh_level = sh_level
        self.random_state = random_state

    def _check(self, base, code, days):
        base = np.asarray(base, dtype=np.float64)
        code = np.asarray(code, dtype=np.float64)
        days = np.asarray(days, dtype=np.int64)
        if base.ndim != 4 or code.ndim != 4 or base.shape[:3] != code.shape[:3]:
            raise ValueError("base and code must be (members, time, variables, npix) "
                             "with matching leading axes")
        if days.shape != (base.shape[1],):
            raise ValueError("days must have one entry per time step")
        if np.any(np.diff(days) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if not (np.all(np.isfinite(base)) and np.all(np.isfinite(code))):
            raise ValueError("non-finite compressed states")
        return base, code, days

    def build(self, n_variables, base_level, code_level):
        self.n_variables_ = n_variables
        self.base_level_ = base_level
        self.code_level_ = code_level
        self.schedule_ = cosine_schedule(self.n_diffusion_steps)
        self.model_ = DiffusionBackbone(n_variables, base_level, code_level, self.d_model,
                                        self.n_blocks, self.d_head, self.sh_degree,
                                        self.sh_level, seed=self.random_state)
        return self

    def fit(self, base, code, days, callback=None):
        base, code, days = self._check(base, code, days)
        if base.shape[1] < self.window:
            raise ValueError("series shorter than one window")
        self.build(base.shape[2], level_from_npix(base.shape[-1]),
                   level_from_npix(code.shape[-1]))
        axes = (0, 1, 3)
        self.base_mean_ = base.mean(axis=axes)
        self.base_std_ = base.std(axis=axes) + 1e-12
        self.code_mean_ = code.mean(axis=axes)
        self.code_std_ = code.std(axis=axes) + 1e-12
        b = (base - self.base_mean_[:, None]) / self.base_std_[:, None]
        c = (code - self.code_mean_[:, None]) / self.code_std_[:, None]

        starts = make_windows(len(days), self.window)
        idx = np.array([(m, s) for m in range(base.shape[0]) for s in starts])
        sl = idx[:, 1:2] + np.arange(self.window)
        data = {"base": torch.as_tensor(b[idx[:, :1], sl], dtype=torch.float32),
                "code": torch.as_tensor(c[idx[:, :1], sl], dtype=torch.float32),
                "days": torch.as_tensor(days[sl])}
        gen = np.random.default_rng(self.random_state)
        sched = self.schedule_
        w = self.base_weight

        model = self.model_

        class _Wrapper(nn.Module):
            def __init__(self):
                super().__init__()
                self.inner = model

            def forward(self, batch):
                n = batch["base"].shape[0]
                t = gen.integers(1, sched.T + 1, size=n)
                eb = torch.as_tensor(gen.standard_normal(batch["base"].shape), dtype=torch.float32)
                ec = torch.as_tensor(gen.standard_normal(batch["code"].shape), dtype=torch.float32)
                xb = q_sample(batch["base"], t, eb, sched)
                xc = q_sample(batch["code"], t, ec, sched)
                vb, vc = self.inner(xb, xc, t, batch["days"].numpy())
                lb = torch.mean((vb.double() - v_target(batch["base"], eb, t, sched).double()) ** 2)
                lc = torch.mean((vc.double() - v_target(batch["code"], ec, t, sched).double()) ** 2)
                return (lc + w * lb) / (1.0 + w)

        self.history_ = train_model(_Wrapper(), data, torch.zeros(len(idx)), self.learning_rate,
                                    self.warmup_iters, self.max_iters, self.batch_size,
                                    seed=self.random_state, callback=callback, loss_fn=lambda loss, _: loss,
                                    params=self.model_.parameters())
        return self

    @torch.no_grad()
    def predict_v(self, base, code, t, days):
        """Standardised-space v-prediction for numpy inputs ``(B, W, V, npix)``."""
        vb, vc = self.model_(torch.as_tensor(base, dtype=torch.float32),
                             torch.as_tensor(code, dtype=torch.float32),
                             np.full(base.shape[0], t), np.asarray(days))
        return vb.double().numpy(), vc.double().numpy()

    def sample(self, days, n_members=1, seed=0, n_steps=None):
        """Draw ``n_members`` windows for the timestamps ``days`` (length ``window``).

        Returns physical-space ``(base, code)`` with shape
        ``(n_members, window, V, npix)``.
        """
        check_is_fitted(self, "model_")
        days = np.asarray(days, dtype=np.int64)
        if days.shape != (self.window,) or np.any(np.diff(days) <= 0):
            raise ValueError(f"need {self.window} strictly increasing timestamps")
        n_steps = self.sample_steps if n_steps is None else n_steps
        shp = (n_members, self.window, self.n_variables_)
        day_b = np.broadcast_to(days, (n_members, self.window))

        def fn(x, t):
            vb, vc = self.predict_v(x["base"], x["code"], t, day_b)
            return {"base": vb, "code": vc}

        x = ddim_sample(fn, self.schedule_, {"base": shp + (npix(self.base_level_),),
                                             "code": shp + (npix(self.code_level_),)},
                        n_steps=n_steps, seed=seed)
        base = x["base"] * self.base_std_[:, None] + self.base_mean_[:, None]
        code = x["code"] * self.code_std_[:, None] + self.code_mean_[:, None]
        return base, code


def desk_diffusion_params(**overrides):
    """Desk-scale sampler: short window, narrow two-block backbone."""
    p = dict(window=3, d_model=32, n_blocks=2, d_head=8, n_diffusion_steps=1000,
             sample_steps=100, learning_rate=1e-3, warmup_iters=50, max_iters=400,
             batch_size=8, sh_degree=4, sh_level=2)
    p.update(overrides)
    return p
