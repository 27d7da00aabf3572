"""Maskable CNN backbones, cost accounting and structural extraction.

Every maskable point is a channel vector after ``relu(affine(conv(x)))``.
Multiplying it by a mask ``m >= 0`` is the same as scaling the layer's
outgoing filters (and affine shift) by ``m``, so a zero entry removes the
channel.  Masks are passed as ``{mask_name: tensor[C]}``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

ChannelMask = dict[str, torch.Tensor]
MaskFn = Callable[[str, torch.Tensor], torch.Tensor]

ARCHS = ("mini_vgg", "mini_resnet")


class ArchitectureError(ValueError):
    pass


@dataclass
class LayerSpec:
    name: str
    kind: str  # conv | linear | pool | norm | shortcut_conv1x1
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    maskable: bool = False
    in_mask: str | None = None
    out_mask: str | None = None
    out_hw: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.kind in ("conv", "shortcut_conv1x1") and self.kernel < 1:
            raise ArchitectureError(f"{self.name}: kernel must be >= 1")
        if self.kind == "shortcut_conv1x1" and self.kernel != 1:
            raise ArchitectureError(f"{self.name}: shortcut kernel must be 1")
        if self.maskable and self.kind not in ("conv", "linear"):
            raise ArchitectureError(f"{self.name}: only conv/linear outputs are maskable")


class ConvUnit(nn.Module):
    """Bias-free convolution, per-channel normalization and affine (scale, shift).

    Normalization always uses the statistics of the current batch (there are
    no running averages), so a channel's output depends only on that channel
    and pruning other channels leaves it untouched.
    """

    norm_eps = 1e-5

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel))
        self.scale = nn.Parameter(torch.ones(out_ch))
        self.shift = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x):
        y = F.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return F.batch_norm(y, None, None, self.scale, self.shift, training=True, eps=self.norm_eps)


class MaskableNetwork(nn.Module):
    """Base class.  Subclasses declare ``conv_plan`` and implement ``features``."""

    arch_name = "base"

    def __init__(self, in_shape: Sequence[int], head_width: int, widths: Mapping[str, int], seed: int = 0):
        super().__init__()
        self.in_shape = tuple(int(s) for s in in_shape)
        self.head_width = int(head_width)
        self.widths = {k: int(v) for k, v in widths.items()}
        self.seed = int(seed)
        if any(w < 1 for w in self.widths.values()):
            raise ArchitectureError("every maskable layer needs at least one channel")
        self.conv_specs = self._plan()
        self.units = nn.ModuleDict()
        for spec in self.conv_specs:
            self.units[spec.name.replace(".", "_")] = ConvUnit(
                spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding)
        self.head = nn.Linear(self.widths[self.mask_names[-1]], self.head_width)
        self.reset_parameters(seed)

    # subclass hooks
    mask_names: list[str]

    def _plan(self) -> list[LayerSpec]:
        raise NotImplementedError

    def features(self, x, masks=None, mask_fn=None):
        raise NotImplementedError

    def unit(self, name: str) -> ConvUnit:
        return self.units[name.replace(".", "_")]

    def reset_parameters(self, seed: int):
        """He fan-in normal for conv/linear weights, zero biases, unit scales."""
        g = torch.Generator().manual_seed(seed)
        for spec in self.conv_specs:
            u = self.unit(spec.name)
            fan_in = u.weight.shape[1] * u.weight.shape[2] * u.weight.shape[3]
            with torch.no_grad():
                u.weight.copy_(torch.randn(u.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                u.scale.fill_(1.0)
                u.shift.zero_()
        self.reset_head(g)

    def reset_head(self, generator: torch.Generator | None = None, head_width: int | None = None):
        if head_width is not None and head_width != self.head_width:
            self.head_width = int(head_width)
            self.head = nn.Linear(self.head.in_features, self.head_width).to(self.head.weight.dtype)
        g = generator or torch.Generator().manual_seed(self.seed + 7919)
        with torch.no_grad():
            fan_in = self.head.in_features
            self.head.weight.copy_(torch.randn(self.head.weight.shape, generator=g) * math.sqrt(1.0 / fan_in))
            self.head.bias.zero_()

    def _apply_mask(self, name, h, masks, mask_fn):
        if mask_fn is not None:
            m = mask_fn(name, h)
        elif masks is not None and name in masks:
            m = masks[name]
        else:
            return h
        if m.shape[-1] != h.shape[1]:
            raise ArchitectureError(f"mask {name}: length {m.shape[-1]} != {h.shape[1]} channels")
        return h * m.reshape(-1, h.shape[1], 1, 1) if m.ndim == 2 else h * m.view(1, -1, 1, 1)

    def forward(self, x, masks: ChannelMask | None = None, mask_fn: MaskFn | None = None):
        return self.head(self.features(x, masks, mask_fn).mean(dim=(2, 3)))

    # -- descriptive helpers
    def layer_specs(self) -> list[LayerSpec]:
        last = self.mask_names[-1]
        head = LayerSpec("head", "linear", self.widths[last], self.head_width, in_mask=last)
        return list(self.conv_specs) + [head]

    def config(self) -> dict:
        return {"arch_name": self.arch_name, "in_shape": list(self.in_shape),
                "head_width": self.head_width, "widths": dict(self.widths), "seed": self.seed}

    def conv_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("head.")]


class MiniVGG(MaskableNetwork):
    arch_name = "mini_vgg"
    default_widths = (16, 16, 32, 32, 64, 64)
    pool_after = (1, 3)

    def __init__(self, in_shape=(1, 16, 16), head_width=4, widths=None, seed=0):
        if widths is None:
            widths = {f"conv{i}": w for i, w in enumerate(self.default_widths)}
        elif not isinstance(widths, Mapping):
            widths = {f"conv{i}": int(w) for i, w in enumerate(widths)}
        self.mask_names = list(widths)
        super().__init__(in_shape, head_width, widths, seed)

    def _plan(self):
        c, h, w = self.in_shape
        specs, prev = [], None
        for i, name in enumerate(self.mask_names):
            in_ch = c if prev is None else self.widths[prev]
            specs.append(LayerSpec(name, "conv", in_ch, self.widths[name], 3, 1, 1, True, prev, name, (h, w)))
            if i in self.pool_after:
                h, w = h // 2, w // 2
            prev = name
        return specs

    def features(self, x, masks=None, mask_fn=None):
        h = x
        for i, name in enumerate(self.mask_names):
            h = F.relu(self.unit(name)(h))
            h = self._apply_mask(name, h, masks, mask_fn)
            if i in self.pool_after:
                h = F.max_pool2d(h, 2)
        return h

    def layer_specs(self):
        specs = []
        for i, s in enumerate(self.conv_specs):
            specs.append(s)
            specs.append(LayerSpec(f"{s.name}.norm", "norm", s.out_channels, s.out_channels, out_hw=s.out_hw))
            if i in self.pool_after:
                hw = (s.out_hw[0] // 2, s.out_hw[1] // 2)
                specs.append(LayerSpec(f"pool{i}", "pool", s.out_channels, s.out_channels, 2, 2, 0, out_hw=hw))
        return specs + super().layer_specs()[-1:]


class MiniResNet(MaskableNetwork):
    """Stem + residual blocks; every block carries a 1x1 projection shortcut.

    Both branches of a block are pruned independently; the block output
    (after the add) is one maskable point shared by the main path and the
    shortcut, so the addition always lines up after extraction.
    """

    arch_name = "mini_resnet"
    default_blocks = ((16, 16, 1), (32, 32, 2), (64, 64, 2))  # (inner, out, stride)
    default_stem = 16

    def __init__(self, in_shape=(1, 16, 16), head_width=4, widths=None, seed=0, strides=None):
        self.strides = list(strides or [b[2] for b in self.default_blocks])
        if widths is None:
            widths = {"stem": self.default_stem}
            for k, (inner, out, _) in enumerate(self.default_blocks):
                widths[f"block{k}.a"] = inner
                widths[f"block{k}.out"] = out
        self.n_blocks = (len(widths) - 1) // 2
        self.mask_names = list(widths)
        super().__init__(in_shape, head_width, widths, seed)

    def _plan(self):
        c, h, w = self.in_shape
        W = self.widths
        specs = [LayerSpec("stem", "conv", c, W["stem"], 3, 1, 1, True, None, "stem", (h, w))]
        prev = "stem"
        for k in range(self.n_blocks):
            s = self.strides[k]
            oh, ow = (h + 2 - 3) // s + 1, (w + 2 - 3) // s + 1
            a, out = f"block{k}.a", f"block{k}.out"
            specs.append(LayerSpec(a, "conv", W[prev], W[a], 3, s, 1, True, prev, a, (oh, ow)))
            specs.append(LayerSpec(f"block{k}.b", "conv", W[a], W[out], 3, 1, 1, True, a, out, (oh, ow)))
            specs.append(LayerSpec(f"block{k}.shortcut", "shortcut_conv1x1", W[prev], W[out], 1, s, 0,
                                   False, prev, out, (oh, ow)))
            prev, h, w = out, oh, ow
        return specs

    def features(self, x, masks=None, mask_fn=None):
        h = F.relu(self.unit("stem")(x))
        h = self._apply_mask("stem", h, masks, mask_fn)
        for k in range(self.n_blocks):
            a = F.relu(self.unit(f"block{k}.a")(h))
            a = self._apply_mask(f"block{k}.a", a, masks, mask_fn)
            out = F.relu(self.unit(f"block{k}.b")(a) + self.unit(f"block{k}.shortcut")(h))
            h = self._apply_mask(f"block{k}.out", out, masks, mask_fn)
        return h

    def config(self):
        cfg = super().config()
        cfg["strides"] = list(self.strides)
        return cfg


def build_network(arch_name: str, in_shape=(1, 16, 16), head_width: int = 4, widths=None,
                  seed: int = 0, dtype=torch.float32, **kwargs) -> MaskableNetwork:
    if arch_name == "mini_vgg":
        net = MiniVGG(in_shape, head_width, widths, seed)
    elif arch_name == "mini_resnet":
        net = MiniResNet(in_shape, head_width, widths, seed, kwargs.get("strides"))
    else:
        raise ArchitectureError(f"unknown arch {arch_name!r}; expected one of {ARCHS}")
    return net.to(dtype)


def network_from_config(cfg: Mapping, dtype=torch.float32) -> MaskableNetwork:
    return build_network(cfg["arch_name"], cfg["in_shape"], cfg["head_width"], cfg["widths"],
                         cfg.get("seed", 0), dtype, strides=cfg.get("strides"))


# -- gradients --------------------------------------------------------------

def gradients(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-mode gradients of ``loss_fn()`` w.r.t. ``params``.

    Parameters that do not influence the loss get a zero tensor.
    """
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def network_gradients(net: MaskableNetwork, loss_fn, batch, masks: ChannelMask | None = None,
                      extra_params: Sequence[torch.Tensor] = ()) -> dict[str, torch.Tensor]:
    """Mean-loss gradients for every trainable network parameter (plus extras)."""
    x, y = batch
    names = [n for n, p in net.named_parameters() if p.requires_grad]
    params = [p for p in net.parameters() if p.requires_grad] + list(extra_params)
    grads = gradients(lambda: loss_fn(net(x, masks), y), params)
    out = dict(zip(names, grads[:len(names)]))
    for i, g in enumerate(grads[len(names):]):
        out[f"extra{i}"] = g
    return out


# -- architectures and costs ------------------------------------------------

@dataclass
class PrunedArchitecture:
    keep_indices: dict[str, list[int]]
    params_kept: int = 0
    flops_kept: int = 0
    params_full: int = 0
    flops_full: int = 0

    @property
    def params_ratio(self) -> float:
        return self.params_kept / self.params_full if self.params_full else 1.0

    @property
    def flops_ratio(self) -> float:
        return self.flops_kept / self.flops_full if self.flops_full else 1.0

    def kept_counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.keep_indices.items()}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params_ratio"] = self.params_ratio
        d["flops_ratio"] = self.flops_ratio
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PrunedArchitecture":
        return cls({k: [int(i) for i in v] for k, v in d["keep_indices"].items()},
                   int(d.get("params_kept", 0)), int(d.get("flops_kept", 0)),
                   int(d.get("params_full", 0)), int(d.get("flops_full", 0)))


def full_keep(net: MaskableNetwork) -> dict[str, list[int]]:
    return {name: list(range(net.widths[name])) for name in net.mask_names}


def _validate_keep(net: MaskableNetwork, keep: Mapping[str, Sequence[int]]):
    if set(keep) != set(net.mask_names):
        raise ArchitectureError(f"keep lists must cover exactly {net.mask_names}, got {sorted(keep)}")
    for name, idx in keep.items():
        idx = list(idx)
        if not idx:
            raise ArchitectureError(f"empty keep list at {name}")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ArchitectureError(f"keep indices at {name} must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= net.widths[name]:
            raise ArchitectureError(f"keep indices at {name} outside [0, {net.widths[name]})")


def count_costs(net: MaskableNetwork, keep: Mapping[str, Sequence[int]] | PrunedArchitecture | None = None
                ) -> tuple[int, int]:
    """(params, MACs) of the kept structure; biases and normalization ignored."""
    if isinstance(keep, PrunedArchitecture):
        keep = keep.keep_indices
    if keep is None:
        keep = full_keep(net)
    _validate_keep(net, keep)
    kept = {k: len(v) for k, v in keep.items()}
    params = flops = 0
    for spec in net.conv_specs:
        c_in = net.in_shape[0] if spec.in_mask is None else kept[spec.in_mask]
        c_out = kept[spec.out_mask]
        weights = spec.kernel * spec.kernel * c_in * c_out
        params += weights
        flops += weights * spec.out_hw[0] * spec.out_hw[1]
    head = kept[net.mask_names[-1]] * net.head_width
    return params + head, flops + head


def make_architecture(net: MaskableNetwork, keep: Mapping[str, Sequence[int]]) -> PrunedArchitecture:
    keep = {name: sorted(int(i) for i in keep[name]) for name in net.mask_names}
    params, flops = count_costs(net, keep)
    params_full, flops_full = count_costs(net)
    return PrunedArchitecture(keep, params, flops, params_full, flops_full)


def hard_masks(net: MaskableNetwork, keep: Mapping[str, Sequence[int]], dtype=None) -> ChannelMask:
    dtype = dtype or next(net.parameters()).dtype
    masks = {}
    for name in net.mask_names:
        m = torch.zeros(net.widths[name], dtype=dtype)
        m[list(keep[name])] = 1.0
        masks[name] = m
    return masks


def fold_masks(net: MaskableNetwork, masks: ChannelMask) -> MaskableNetwork:
    """Copy of ``net`` with non-negative mask values folded into the affine parameters."""
    folded = copy.deepcopy(net)
    with torch.no_grad():
        for spec in folded.conv_specs:
            m = masks[spec.out_mask].detach().to(spec_dtype(folded))
            if (m < 0).any():
                raise ArchitectureError("only non-negative masks can be folded")
            u = folded.unit(spec.name)
            u.scale.mul_(m)
            u.shift.mul_(m)
    return folded


def spec_dtype(net: MaskableNetwork):
    return next(net.parameters()).dtype


def extract_subnetwork(net: MaskableNetwork, arch: PrunedArchitecture | Mapping[str, Sequence[int]]
                       ) -> MaskableNetwork:
    """Physically remove pruned channels; the result is a smaller network of the same family."""
    keep = arch.keep_indices if isinstance(arch, PrunedArchitecture) else arch
    _validate_keep(net, keep)
    widths = {name: len(keep[name]) for name in net.mask_names}
    cfg = net.config()
    cfg["widths"] = widths
    small = network_from_config(cfg, dtype=spec_dtype(net))
    with torch.no_grad():
        for spec in net.conv_specs:
            src, dst = net.unit(spec.name), small.unit(spec.name)
            rows = torch.as_tensor(keep[spec.out_mask])
            w = src.weight[rows]
            if spec.in_mask is not None:
                w = w[:, torch.as_tensor(keep[spec.in_mask])]
            dst.weight.copy_(w)
            dst.scale.copy_(src.scale[rows])
            dst.shift.copy_(src.shift[rows])
        last = torch.as_tensor(keep[net.mask_names[-1]])
        small.head.weight.copy_(net.head.weight[:, last])
        small.head.bias.copy_(net.head.bias)
    return small
