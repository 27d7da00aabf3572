"""Comparison arms: random structured pruning and input-independent beta-Bernoulli dropout."""
from __future__ import annotations

import logging
import time
from dataclasses import replace

import numpy as np
import torch

from ..backbone import MaskableNetwork, PrunedArchitecture, extract_subnetwork, fold_masks, make_architecture
from ..data import Dataset, TaskBatch, mix_seed
from ..mask_gen import architecture_from_masks
from ..meta import TrainConfig, adapt_pass, build_stamp_model, pass_optimizers

log = logging.getLogger(__name__)


class BudgetInfeasible(RuntimeError):
    pass


def random_structured(net: MaskableNetwork, flops_budget: float, rng: np.random.Generator,
                      band: tuple[float, float] = (0.4, 0.8), max_attempts: int = 2000) -> PrunedArchitecture:
    """Rejection-sample per-layer keep ratios from ``band`` until the FLOPs ratio fits the budget.

    ``band`` is the range of kept fractions, so (0.4, 0.8) prunes between
    20% and 60% of every layer.  At least one channel always survives.
    """
    if not 0 < flops_budget <= 1:
        raise ValueError("flops_budget must lie in (0, 1]")
    lo, hi = band
    for attempt in range(max_attempts):
        keep = {}
        for name in net.mask_names:
            width = net.widths[name]
            n = max(1, int(round(rng.uniform(lo, hi) * width)))
            keep[name] = sorted(rng.choice(width, size=min(n, width), replace=False).tolist())
        arch = make_architecture(net, keep)
        if arch.flops_ratio <= flops_budget:
            log.debug("random structure accepted after %d attempts", attempt + 1)
            return arch
    raise BudgetInfeasible(f"no structure with flops ratio <= {flops_budget} in {max_attempts} attempts")


def _as_task(dataset: Dataset) -> TaskBatch:
    return TaskBatch(dataset.inputs, dataset.remapped_labels(), list(dataset.class_ids))


def bbdropout(target_train: Dataset, cfg: TrainConfig, epochs: int, seed: int, arch: str = "mini_vgg",
              kl_scale: float | None = None, dtype=torch.float32):
    """Train a fresh masked network on the whole target set, then threshold E[pi].

    The keep probability is pi alone: no encoder and no set gate.  Returns
    ``(compact_network, architecture, info)``; the compact network has the
    expected keep probabilities folded into its weights.
    """
    cfg = replace(cfg, kl_scale=cfg.kl_scale if kl_scale is None else kl_scale)
    t0 = time.perf_counter()
    model = build_stamp_model(arch, target_train.image_shape, len(target_train.class_ids), cfg,
                              seed=mix_seed(seed, 31), dtype=dtype, set_dependent=False)
    task = _as_task(target_train)
    lrs = cfg.inner_lrs()
    optimizers = pass_optimizers(model, lrs)
    losses = []
    for epoch in range(epochs):
        factor = cfg.lr_factor(epoch * cfg.epochs // max(1, epochs))
        for opt in optimizers:
            if opt is None:
                continue
            for group, base in zip(opt.param_groups, _base_lrs(lrs, opt is optimizers[1])):
                group["lr"] = base * factor
        _, stats = adapt_pass(model, task, cfg, lrs, mix_seed(seed, 500 + epoch), optimizers=optimizers)
        losses.extend(stats.losses)
    with torch.no_grad():
        em = model.masks(mode="expected")
        pruned, repaired = architecture_from_masks(model.net, em, model.masker.threshold)
    compact = extract_subnetwork(fold_masks(model.net, em), pruned)
    info = {"search_time_s": time.perf_counter() - t0, "repaired": repaired, "final_loss": losses[-1] if losses else None,
            "kl_scale": cfg.kl_scale}
    return compact, pruned, info


def _base_lrs(lrs, is_theta):
    return [lrs["theta"]] if is_theta else [lrs["W"], lrs["pi"]]
