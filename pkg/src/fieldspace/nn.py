"""Small differentiable building blocks on top of torch autograd.

The layers are written out explicitly (no ``torch.nn.Linear`` /
``MultiheadAttention``) so their math is visible and gradient-checked in the
tests. Parameters live in ``torch.nn.Module`` objects, which double as the
named parameter store used by checkpoints.
"""
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


def glorot_(w, generator=None):
    """Uniform init in ``+-sqrt(6 / (fan_in + fan_out))``."""
    fan_out, fan_in = w.shape[0], w.shape[1]
    a = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        w.uniform_(-a, a, generator=generator)
    return w


def linear(x, weight, bias=None):
    """``y = x W^T + b`` over the last axis."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[-1]} features, weight expects {weight.shape[1]}")
    y = x @ weight.transpose(0, 1)
    return y if bias is None else y + bias


class Linear(nn.Module):
    def __init__(self, n_in, n_out, bias=True, init="glorot", generator=None):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(n_out, n_in))
        self.bias = nn.Parameter(torch.zeros(n_out)) if bias else None
        if init == "glorot":
            glorot_(self.weight, generator)
        elif init != "zeros":
            raise ValueError(f"unknown init {init!r}")

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.shift = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=-1, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps) * self.gain + self.shift


def scaled_dot_product(q, k, v):
    """Softmax attention over the second-to-last axis; returns (output, weights)."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    w = torch.softmax(scores, dim=-1)
    return w @ v, w


class MultiHeadAttention(nn.Module):
    """Multi-head attention over the sequence axis (-2) of ``(..., L, d_model)``.

    With ``zero_out=True`` the output projection starts at zero, so a residual
    block built on it is the identity at initialisation.
    """

    def __init__(self, d_model, n_heads, zero_out=False, generator=None):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by the number of heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, generator=generator)
        self.k = Linear(d_model, d_model, generator=generator)
        self.v = Linear(d_model, d_model, generator=generator)
        self.out = Linear(d_model, d_model, init="zeros" if zero_out else "glorot",
                          generator=generator)
        self.last_weights = None

    def _split(self, x):
        return x.reshape(x.shape[:-1] + (self.n_heads, -1)).transpose(-2, -3)

    def forward(self, x, context=None):
        if x.shape[-1] != self.d_model:
            raise ValueError(f"expected d_model={self.d_model}, got {x.shape[-1]}")
        ctx = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        h, w = scaled_dot_product(q, k, v)
        self.last_weights = w.detach()
        h = h.transpose(-2, -3).reshape(x.shape[:-1] + (self.d_model,))
        return self.out(h)


class FeedForward(nn.Module):
    def __init__(self, d_model, expansion=4, zero_out=False, generator=None):
        super().__init__()
        self.up = Linear(d_model, expansion * d_model, generator=generator)
        self.down = Linear(expansion * d_model, d_model,
                           init="zeros" if zero_out else "glorot", generator=generator)

    def forward(self, x):
        return self.down(torch.nn.functional.gelu(self.up(x)))


class TransformerLayer(nn.Module):
    """Pre-norm self-attention + feed-forward, both with residual connections."""

    def __init__(self, d_model, n_heads, zero_out=True, generator=None):
        super().__init__()
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, zero_out, generator)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, zero_out=zero_out, generator=generator)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    warmup_iters: int = 2000
    max_iters: int = 30000
    batch_size: int = 8
    d_model: int = 512
    d_head: int = 16

    def __post_init__(self):
        if not 0 <= self.warmup_iters < self.max_iters:
            raise ValueError("warmup_iters must be smaller than max_iters")
        if self.d_model % self.d_head:
            raise ValueError("d_model must be divisible by d_head")

    @property
    def n_heads(self):
        return self.d_model // self.d_head


def lr_schedule(it, base_lr, warmup_iters, max_iters):
    """Linear warm-up to ``base_lr`` then cosine annealing to zero at ``max_iters``."""
    if not 0 <= it <= max_iters:
        raise ValueError(f"iteration {it} outside [0, {max_iters}]")
    if it <= warmup_iters:
        return base_lr * it / warmup_iters if warmup_iters else base_lr
    frac = (it - warmup_iters) / (max_iters - warmup_iters)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam with bias correction. A step with any non-finite gradient is skipped.

    ``step`` returns ``False`` for a skipped step and counts it in ``skipped``.
    """

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.skipped = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr):
        grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in self.params]
        if not all(bool(torch.isfinite(g).all()) for g in grads):
            self.skipped += 1
            return False
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))
        return True


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """Functional Adam update on numpy arrays.

    ``state`` is a dict holding ``t``, ``m`` and ``v`` (created on first use).
    Returns the new parameter list, or raises ``FloatingPointError`` on a
    non-finite gradient without touching ``state``.
    """
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise FloatingPointError("non-finite gradient; step aborted")
    if "t" not in state:
        state.update(t=0, m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params])
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state["m"][i] = b1 * state["m"][i] + (1 - b1) * g
        state["v"][i] = b2 * state["v"][i] + (1 - b2) * g * g
        mhat = state["m"][i] / (1 - b1 ** t)
        vhat = state["v"][i] / (1 - b2 ** t)
        out.append(p - lr * mhat / (np.sqrt(vhat) + eps))
    return out


def gradient_check(fn, inputs, step=1e-4, n_probe=None, seed=0, abs_floor=1e-8):
    """Compare autograd gradients of scalar ``fn(*inputs)`` with central differences.

    Runs in float64. ``n_probe`` limits the number of finite-difference
    coordinates per input (random subset); ``None`` checks all of them.
    Returns the worst normwise relative error over inputs. Inputs whose
    gradient vanishes identically (e.g. a key bias under softmax shift
    invariance) are compared absolutely: a difference below
    ``abs_floor * max(1, |f|)`` counts as exact, since that is the level of
    finite-difference round-off.
    """
    rng = np.random.default_rng(seed)
    xs = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    out = fn(*xs)
    grads = torch.autograd.grad(out, xs, allow_unused=True)
    floor = abs_floor * max(1.0, abs(out.item()))
    worst = 0.0
    for i, (x, g) in enumerate(zip(xs, grads)):
        g = torch.zeros_like(x) if g is None else g
        flat = x.detach().reshape(-1)
        coords = np.arange(flat.numel())
        if n_probe is not None and n_probe < coords.size:
            coords = rng.choice(coords, n_probe, replace=False)
        fd = np.empty(coords.size)
        with torch.no_grad():
            for j, c in enumerate(coords):
                args = [y.detach() for y in xs]
                plus = flat.clone()
                plus[c] += step
                minus = flat.clone()
                minus[c] -= step
                args[i] = plus.reshape(x.shape)
                f_plus = float(fn(*args))
                args[i] = minus.reshape(x.shape)
                f_minus = float(fn(*args))
                fd[j] = (f_plus - f_minus) / (2 * step)
        ga = g.reshape(-1).detach().numpy()[coords]
        diff = np.linalg.norm(ga - fd)
        if diff <= floor:
            continue
        worst = max(worst, float(diff / max(np.linalg.norm(ga), np.linalg.norm(fd))))
    return worst
