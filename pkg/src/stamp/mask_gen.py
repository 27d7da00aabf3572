"""Set-dependent beta-Bernoulli channel masks.

For every maskable layer the keep probability of channel ``c`` is::

    p_c = pi_c * clamp(gamma_c * pool(o)_c + beta_c, eps, 1 - eps)

with ``pi_c ~ Kumaraswamy(a_c, b_c)`` (variational posterior of a
``Beta(alpha, 1)`` prior) and ``o`` the layer activation produced by the set
representation.  Training uses binary-concrete samples of the Bernoulli;
evaluation uses ``E[m] = E[pi] * clamp(...)``.
"""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

from .backbone import ChannelMask, MaskableNetwork, PrunedArchitecture, make_architecture

EULER_GAMMA = 0.5772156649015329
U_CLIP = 1e-8
P_FLOOR = 1e-30  # keeps log(p) finite when a keep probability underflows

MODES = ("relaxed", "expected", "hard")


def clamp_psi(x, eps: float):
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 0.5)")
    if torch.is_tensor(x):
        return x.clamp(eps, 1 - eps)
    return min(1 - eps, max(eps, x))


def sample_pi(a, b, u):
    """Reparameterised Kumaraswamy(a, b) draw via the inverse CDF."""
    u = u.clamp(U_CLIP, 1 - U_CLIP)
    # (1 - u^(1/b))^(1/a) in log space; log(1 - e^x) for x = log(u)/b < 0
    x = (torch.log(u) / b).clamp(max=-torch.finfo(u.dtype).eps)
    log1m = torch.where(x > -0.693, torch.log(-torch.expm1(x)), torch.log1p(-torch.exp(x)))
    return torch.exp(log1m / a)


def kumaraswamy_mean(a, b):
    """E[pi] = b * Beta(1 + 1/a, b)."""
    return torch.exp(torch.log(b) + torch.lgamma(1 + 1 / a) + torch.lgamma(b) - torch.lgamma(1 + 1 / a + b))


def channel_pool(o):
    """Spatial mean per channel of a ``[1, C, H, W]`` activation."""
    if o.ndim != 4 or o.shape[0] != 1:
        raise ValueError(f"channel_pool expects [1, C, H, W], got {tuple(o.shape)}")
    return o.mean(dim=(0, 2, 3))


def keep_probability(pi, pooled, gamma, beta, eps: float):
    return pi * clamp_psi(gamma * pooled + beta, eps)


def sample_mask_relaxed(p, tau: float, v):
    """Binary-concrete relaxation of Bernoulli(p) with temperature ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    v = v.clamp(U_CLIP, 1 - U_CLIP)
    tiny = torch.finfo(p.dtype).eps
    p = p.clamp(P_FLOOR, 1 - tiny)
    logit = torch.log(p) - torch.log1p(-p) + torch.log(v) - torch.log1p(-v)
    # keep the value strictly inside (0, 1) where the sigmoid saturates
    return torch.sigmoid(logit / tau).clamp(tiny, 1 - tiny)


def kl_kumaraswamy_beta(a, b, alpha):
    """Closed-form KL(Kumaraswamy(a, b) || Beta(alpha, 1)), elementwise."""
    if torch.any(a <= 0) or torch.any(b <= 0) or float(alpha) <= 0:
        raise ValueError("shape parameters must be positive")
    alpha = torch.as_tensor(alpha, dtype=a.dtype)
    return ((a - alpha) / a * (-EULER_GAMMA - torch.digamma(b) - 1 / b)
            + torch.log(a * b) - torch.log(alpha) - (b - 1) / b)


def kl_gaussian(mu, sigma0: float, b_prior: float):
    """KL(N(mu, sigma0^2) || N(0, b_prior)), elementwise."""
    if sigma0 <= 0 or b_prior <= 0:
        raise ValueError("variances must be positive")
    return (sigma0 ** 2 + mu ** 2) / (2 * b_prior) - 0.5 + math.log(math.sqrt(b_prior) / sigma0)


class LayerMaskParams(nn.Module):
    """Variational parameters of one maskable layer.

    ``log_a``/``log_b`` hold the Kumaraswamy shapes in log space; ``gamma``
    and ``beta_mean`` are the gate scale and shift.  ``alpha`` (prior shape),
    ``eps``, ``b_prior`` and ``sigma0`` are fixed hyperparameters.  The
    posterior starts at ``Kumaraswamy(a_init, 1)``; ``a_init=None`` means the
    prior itself.
    """

    def __init__(self, channels: int, alpha: float = 1.0, eps: float = 0.01, b_prior: float = 1.0,
                 sigma0: float = 0.1, gamma_init: float = 1.0, beta_init: float = 0.0,
                 a_init: float | None = None, dtype=torch.float32):
        super().__init__()
        a_init = alpha if a_init is None else a_init
        if alpha <= 0 or b_prior <= 0 or sigma0 <= 0 or a_init <= 0:
            raise ValueError("alpha, a_init, b_prior and sigma0 must be positive")
        if not 0 < eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        self.alpha, self.eps, self.b_prior, self.sigma0 = float(alpha), float(eps), float(b_prior), float(sigma0)
        self.log_a = nn.Parameter(torch.full((channels,), math.log(a_init), dtype=dtype))
        self.log_b = nn.Parameter(torch.zeros(channels, dtype=dtype))
        self.gamma = nn.Parameter(torch.full((channels,), gamma_init, dtype=dtype))
        self.beta_mean = nn.Parameter(torch.full((channels,), beta_init, dtype=dtype))

    @property
    def channels(self) -> int:
        return self.log_a.numel()

    @property
    def a(self):
        return self.log_a.exp()

    @property
    def b(self):
        return self.log_b.exp()

    def expected_pi(self):
        return kumaraswamy_mean(self.a, self.b)

    def gate(self, pooled):
        return clamp_psi(self.gamma * pooled + self.beta_mean, self.eps)

    def kl(self):
        return (kl_kumaraswamy_beta(self.a, self.b, self.alpha).sum()
                + kl_gaussian(self.beta_mean, self.sigma0, self.b_prior).sum())

    def hparams(self) -> dict:
        return {"alpha": self.alpha, "eps": self.eps, "b_prior": self.b_prior, "sigma0": self.sigma0}


class MaskGenerator(nn.Module):
    """One :class:`LayerMaskParams` per maskable layer of a network.

    With ``set_dependent=False`` the gate is dropped and ``p = pi`` (plain
    input-independent beta-Bernoulli dropout).
    """

    def __init__(self, widths: Mapping[str, int], alpha: float = 1.0, eps: float = 0.01,
                 b_prior: float = 1.0, sigma0: float = 0.1, tau: float = 0.1, threshold: float = 0.01,
                 set_dependent: bool = True, a_init: float | None = None, beta_init: float = 0.0,
                 dtype=torch.float32):
        super().__init__()
        self.names = list(widths)
        self.a_init, self.beta_init = a_init, float(beta_init)
        self.layers = nn.ModuleDict({
            n.replace(".", "_"): LayerMaskParams(w, alpha, eps, b_prior, sigma0, beta_init=beta_init,
                                                 a_init=a_init, dtype=dtype)
            for n, w in widths.items()})
        self.tau, self.threshold, self.set_dependent = float(tau), float(threshold), bool(set_dependent)

    def layer(self, name: str) -> LayerMaskParams:
        return self.layers[name.replace(".", "_")]

    def config(self) -> dict:
        first = self.layer(self.names[0])
        return {"widths": {n: self.layer(n).channels for n in self.names}, **first.hparams(),
                "tau": self.tau, "threshold": self.threshold, "set_dependent": self.set_dependent,
                "a_init": self.a_init, "beta_init": self.beta_init}


def expected_mask(params: LayerMaskParams, pooled=None):
    e_pi = params.expected_pi()
    if pooled is None:
        return e_pi
    return e_pi * params.gate(pooled)


def kl_regularizer(generator: MaskGenerator):
    return sum(generator.layer(n).kl() for n in generator.names)


def _emit(params: LayerMaskParams, pooled, mode: str, tau: float, threshold: float,
          rng: torch.Generator | None):
    dtype = params.log_a.dtype
    if mode == "relaxed":
        u = torch.rand(params.channels, generator=rng, dtype=dtype)
        v = torch.rand(params.channels, generator=rng, dtype=dtype)
        pi = sample_pi(params.a, params.b, u)
        p = pi if pooled is None else keep_probability(pi, pooled, params.gamma, params.beta_mean, params.eps)
        return sample_mask_relaxed(p, tau, v)
    em = expected_mask(params, pooled)
    if mode == "expected":
        return em
    if mode == "hard":
        hard = (em > threshold).to(dtype)
        if hard.sum() == 0:
            hard[int(torch.argmax(em))] = 1.0
        return hard
    raise ValueError(f"unknown mask mode {mode!r}; expected one of {MODES}")


def generate_masks(net: MaskableNetwork, generator: MaskGenerator, set_image=None, mode: str = "expected",
                   rng: torch.Generator | None = None, tau: float | None = None,
                   threshold: float | None = None) -> tuple[ChannelMask, dict[str, torch.Tensor]]:
    """Run the set representation through ``net`` and emit one mask per maskable layer.

    ``set_image`` is the representation reshaped to ``[1, C, H, W]``.  Each
    emitted mask multiplies its layer's activation before it propagates, so
    deeper masks see the already-masked path.  Returns ``(masks, pooled)``.
    """
    tau = generator.tau if tau is None else tau
    threshold = generator.threshold if threshold is None else threshold
    masks: ChannelMask = {}
    pooled_out: dict[str, torch.Tensor] = {}
    if not generator.set_dependent:
        for name in generator.names:
            masks[name] = _emit(generator.layer(name), None, mode, tau, threshold, rng)
        return masks, pooled_out
    if set_image is None:
        raise ValueError("set-dependent masks need a set representation")

    def mask_fn(name, h):
        pooled = channel_pool(h)
        if not torch.isfinite(pooled).all():
            raise FloatingPointError(f"non-finite activations at {name}")
        pooled_out[name] = pooled
        masks[name] = _emit(generator.layer(name), pooled, mode, tau, threshold, rng)
        return masks[name]

    net.features(set_image, mask_fn=mask_fn)
    return masks, pooled_out


def architecture_from_masks(net: MaskableNetwork, expected: ChannelMask, threshold: float
                            ) -> tuple[PrunedArchitecture, list[str]]:
    """Threshold expected masks into keep lists; returns the layers that needed the keep-one repair."""
    keep, repaired = {}, []
    for name in net.mask_names:
        em = expected[name].detach().cpu().numpy()
        idx = np.flatnonzero(em > threshold).tolist()
        if not idx:
            idx = [int(np.argmax(em))]
            repaired.append(name)
        keep[name] = idx
    return make_architecture(net, keep), repaired
