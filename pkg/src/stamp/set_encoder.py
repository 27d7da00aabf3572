"""Permutation-invariant dataset encoder built from attention blocks.

``encode_set`` maps a sampled set ``X [B, d]`` to ``r`` rows of width ``d``::

    rF(AE(Pool_r(AE(AE(X)))))

where ``AE(X, Y) = LN(H + rF(H))`` with ``H = LN(X + MH(X, Y, Y))`` and
``Pool_r(Z) = AE(R, rF(Z))`` attends from ``r`` learned seed rows.  The
model width equals the flattened input dimension.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _init_linear(layer: nn.Linear, generator: torch.Generator):
    with torch.no_grad():
        fan_in = layer.in_features
        layer.weight.copy_(torch.randn(layer.weight.shape, generator=generator) / math.sqrt(fan_in))
        if layer.bias is not None:
            layer.bias.zero_()


def scaled_dot_attention(q, k, v):
    """Softmax(q k^T / sqrt(d_head)) v over the last two dims, row-max stabilised."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    scores = scores - scores.amax(dim=-1, keepdim=True).detach()
    weights = torch.exp(scores)
    return (weights / weights.sum(dim=-1, keepdim=True)) @ v


def multihead_attention(Q, K, V, heads: int, wq=None, wk=None, wv=None, wo=None):
    """Functional multi-head attention on ``[n, d]`` queries and ``[m, d]`` keys/values.

    Projections are callables (``nn.Linear`` or similar); ``None`` means identity.
    """
    d = Q.shape[-1]
    if K.shape[-1] != d or V.shape[-1] != d:
        raise ValueError(f"dimension mismatch: Q {tuple(Q.shape)}, K {tuple(K.shape)}, V {tuple(V.shape)}")
    if K.shape[-2] != V.shape[-2]:
        raise ValueError("K and V need the same number of rows")
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    ident = lambda t: t  # noqa: E731
    q, k, v = (wq or ident)(Q), (wk or ident)(K), (wv or ident)(V)
    dh = d // heads

    def split(t):
        return t.reshape(*t.shape[:-1], heads, dh).transpose(-3, -2)

    out = scaled_dot_attention(split(q), split(k), split(v))
    out = out.transpose(-3, -2).reshape(*Q.shape[:-1], d)
    return (wo or ident)(out)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, generator: torch.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q, self.k, self.v, self.o = (nn.Linear(dim, dim) for _ in range(4))
        for lin in (self.q, self.k, self.v, self.o):
            _init_linear(lin, generator)

    def forward(self, Q, K, V):
        return multihead_attention(Q, K, V, self.heads, self.q, self.k, self.v, self.o)


class RowFF(nn.Module):
    """Row-wise feed-forward: Linear followed by ReLU."""

    def __init__(self, dim: int, generator: torch.Generator):
        super().__init__()
        self.fc = nn.Linear(dim, dim)
        _init_linear(self.fc, generator)

    def forward(self, x):
        return F.relu(self.fc(x))


class AttentionBlock(nn.Module):
    """``AE(X, Y)``; with ``Y`` omitted it is self-attention and row-equivariant."""

    def __init__(self, dim: int, heads: int, generator: torch.Generator, ln_eps: float = 1e-9):
        super().__init__()
        self.mh = MultiHeadAttention(dim, heads, generator)
        self.norm1 = nn.LayerNorm(dim, eps=ln_eps)
        self.ff = RowFF(dim, generator)
        self.norm2 = nn.LayerNorm(dim, eps=ln_eps)

    def forward(self, X, Y=None):
        Y = X if Y is None else Y
        H = self.norm1(X + self.mh(X, Y, Y))
        return self.norm2(H + self.ff(H))


class PoolR(nn.Module):
    """Pooling by attention from ``r`` learnable seed rows."""

    def __init__(self, dim: int, heads: int, r: int, generator: torch.Generator, ln_eps: float = 1e-9):
        super().__init__()
        self.seeds = nn.Parameter(torch.randn(r, dim, generator=generator) / math.sqrt(dim))
        self.ff = RowFF(dim, generator)
        self.block = AttentionBlock(dim, heads, generator, ln_eps)

    def forward(self, Z):
        return self.block(self.seeds, self.ff(Z))


class InducedBlock(nn.Module):
    """Low-rank self-attention through ``m`` inducing rows: AE(X, AE(I, X))."""

    def __init__(self, dim: int, heads: int, m: int, generator: torch.Generator, ln_eps: float = 1e-9):
        super().__init__()
        self.inducing = nn.Parameter(torch.randn(m, dim, generator=generator) / math.sqrt(dim))
        self.inner = AttentionBlock(dim, heads, generator, ln_eps)
        self.outer = AttentionBlock(dim, heads, generator, ln_eps)

    def forward(self, X):
        return self.outer(X, self.inner(self.inducing, X))


class SetEncoder(nn.Module):
    def __init__(self, dim: int, heads: int = 4, r: int = 1, seed: int = 0, ln_eps: float = 1e-9,
                 inducing_points: int | None = None):
        super().__init__()
        if r < 1:
            raise ValueError("r must be >= 1")
        g = torch.Generator().manual_seed(seed)
        self.dim, self.heads, self.r = dim, heads, r
        self.inducing_points = inducing_points
        if inducing_points:
            self.enc1 = InducedBlock(dim, heads, inducing_points, g, ln_eps)
            self.enc2 = InducedBlock(dim, heads, inducing_points, g, ln_eps)
        else:
            self.enc1 = AttentionBlock(dim, heads, g, ln_eps)
            self.enc2 = AttentionBlock(dim, heads, g, ln_eps)
        self.pool = PoolR(dim, heads, r, g, ln_eps)
        self.dec = AttentionBlock(dim, heads, g, ln_eps)
        self.out = nn.Linear(dim, dim)
        _init_linear(self.out, g)
        self.calls = 0

    def forward(self, X):
        if X.ndim != 2 or X.shape[-1] != self.dim:
            raise ValueError(f"expected a set of shape [B, {self.dim}], got {tuple(X.shape)}")
        self.calls += 1
        z = self.out(self.dec(self.pool(self.enc2(self.enc1(X)))))
        if not torch.isfinite(z).all():
            raise FloatingPointError("non-finite activations in set encoder")
        return z

    def config(self) -> dict:
        return {"dim": self.dim, "heads": self.heads, "r": self.r,
                "inducing_points": self.inducing_points}


def encode_set(X, encoder: SetEncoder):
    return encoder(X)
