"""Meta-training, K-step target pruning and fine-tuning.

The learnable state is a :class:`StampModel`: backbone weights, mask
parameters and set encoder.  Meta-training runs first-order inner
adaptation on every reference task and applies the summed last-minibatch
gradients to the shared initialisation.
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import MaskableNetwork, PrunedArchitecture, build_network, extract_subnetwork, fold_masks
from .data import Dataset, TaskBatch, TaskSplit, minibatches, mix_seed, sample_task, sample_tasks
from .mask_gen import MaskGenerator, architecture_from_masks, generate_masks, kl_regularizer
from .set_encoder import SetEncoder

log = logging.getLogger(__name__)

GROUPS = ("W", "pi", "theta")


class AdaptationError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    tasks: int = 3
    per_class: int = 32
    minibatch: int = 32
    lr_w: float = 1e-3
    lr_pi: float = 1e-2
    lr_theta: float = 1e-3
    outer_lr_w: float = 1e-3
    outer_lr_pi: float = 1e-2
    outer_lr_theta: float = 1e-3
    prune_lr_pi: float = 1e-2
    milestones: tuple[float, ...] = (0.5, 0.8)
    outer_mode: str = "fomaml"  # or "reptile"
    K: int = 1
    kl_scale: float = 15.0
    kl_denominator: float = 1000.0
    tau: float = 0.1
    alpha: float = 1.0
    a_init: float | None = None
    beta_init: float = 0.0
    eps: float = 0.01
    b_prior: float = 1.0
    sigma0: float = 0.1
    threshold: float = 0.01
    heads: int = 4
    r: int = 1
    inducing_points: int | None = None
    pretrain_epochs: int = 0
    pretrain_lr: float = 1e-3
    finetune_epochs: int = 10
    finetune_lr: float = 1e-3
    finetune_batch: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "tasks", "per_class", "minibatch", "K", "finetune_epochs", "pretrain_epochs"):
            if getattr(self, name) < (1 if name in ("tasks", "per_class", "minibatch") else 0):
                raise ValueError(f"{name} out of range: {getattr(self, name)}")
        for name in ("lr_w", "lr_pi", "lr_theta", "outer_lr_w", "outer_lr_pi", "outer_lr_theta", "prune_lr_pi",
                     "tau", "alpha", "kl_denominator", "finetune_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.outer_mode not in ("fomaml", "reptile"):
            raise ValueError(f"unknown outer_mode {self.outer_mode!r}")
        self.milestones = tuple(self.milestones)

    def inner_lrs(self) -> dict[str, float]:
        return {"W": self.lr_w, "pi": self.lr_pi, "theta": self.lr_theta}

    def outer_lrs(self) -> dict[str, float]:
        return {"W": self.outer_lr_w, "pi": self.outer_lr_pi, "theta": self.outer_lr_theta}

    def prune_lrs(self) -> dict[str, float]:
        return {"W": self.lr_w, "pi": self.prune_lr_pi, "theta": self.lr_theta}

    def lr_factor(self, epoch: int) -> float:
        """0.1 per passed milestone (fractions of ``epochs``)."""
        passed = sum(epoch >= m * self.epochs for m in self.milestones)
        return 0.1 ** passed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


class StampModel(nn.Module):
    """Backbone + mask generator + set encoder (the meta-learned state)."""

    def __init__(self, net: MaskableNetwork, masker: MaskGenerator, encoder: SetEncoder | None):
        super().__init__()
        self.net, self.masker, self.encoder = net, masker, encoder

    def set_image(self, flat_inputs):
        if self.encoder is None:
            return None
        rep = self.encoder(flat_inputs.to(self.net.head.weight.dtype))
        return rep[:1].reshape(1, *self.net.in_shape)

    def groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out = {"W": [], "head": [], "pi": [], "theta": []}
        for name, p in self.named_parameters():
            if name.startswith("net.head."):
                out["head"].append((name, p))
            elif name.startswith("net."):
                out["W"].append((name, p))
            elif name.startswith("masker."):
                out["pi"].append((name, p))
            else:
                out["theta"].append((name, p))
        return out

    def meta_parameters(self) -> list[tuple[str, nn.Parameter]]:
        g = self.groups()
        return g["W"] + g["pi"] + g["theta"]

    def masks(self, flat_inputs=None, mode="expected", rng=None, set_image=None):
        if set_image is None and self.masker.set_dependent:
            set_image = self.set_image(flat_inputs)
        return generate_masks(self.net, self.masker, set_image, mode, rng)[0]


def build_stamp_model(arch: str, in_shape: Sequence[int], head_width: int, cfg: TrainConfig,
                      seed: int = 0, dtype=torch.float32, set_dependent: bool = True) -> StampModel:
    net = build_network(arch, in_shape, head_width, seed=seed, dtype=dtype)
    masker = MaskGenerator(net.widths, cfg.alpha, cfg.eps, cfg.b_prior, cfg.sigma0, cfg.tau, cfg.threshold,
                           set_dependent=set_dependent, a_init=cfg.a_init, beta_init=cfg.beta_init, dtype=dtype)
    encoder = None
    if set_dependent:
        dim = int(torch.tensor(in_shape).prod())
        encoder = SetEncoder(dim, cfg.heads, cfg.r, seed=seed + 1, inducing_points=cfg.inducing_points).to(dtype)
    return StampModel(net, masker, encoder)


def task_objective(model: StampModel, inputs, labels, masks, kl_scale: float, kl_denominator: float):
    """Cross-entropy plus scaled KL; returns (loss, ce, kl)."""
    logits = model.net(inputs.to(model.net.head.weight.dtype), masks)
    ce = F.cross_entropy(logits, labels)
    kl = kl_regularizer(model.masker)
    return ce + kl_scale * kl / kl_denominator, ce, kl


@dataclass
class PassStats:
    losses: list[float] = field(default_factory=list)
    ces: list[float] = field(default_factory=list)
    kls: list[float] = field(default_factory=list)
    encodes: int = 0


def pass_optimizers(model: StampModel, lrs: dict[str, float], lr_factor: float = 1.0):
    """Adam for (W + head, pi-params) and a separate Adam for the encoder."""
    groups = model.groups()
    opt = torch.optim.Adam([
        {"params": [p for _, p in groups["W"]] + [p for _, p in groups["head"]], "lr": lrs["W"] * lr_factor},
        {"params": [p for _, p in groups["pi"]], "lr": lrs["pi"] * lr_factor},
    ])
    theta = [p for _, p in groups["theta"]]
    theta_opt = torch.optim.Adam(theta, lr=lrs["theta"] * lr_factor) if theta else None
    return opt, theta_opt


def adapt_pass(model: StampModel, task: TaskBatch, cfg: TrainConfig, lrs: dict[str, float], seed: int,
               lr_factor: float = 1.0, optimizers=None) -> tuple[dict[str, torch.Tensor], PassStats]:
    """One pass over the task's minibatches, updating ``model`` in place.

    The set representation is encoded once and shared by every minibatch.
    Backbone, head and mask parameters step after each minibatch; the
    encoder accumulates its gradient and steps once at the end of the pass.
    Returns the meta-parameter gradients of the final minibatch.  Pass
    ``optimizers`` (from :func:`pass_optimizers`) to keep optimizer state
    across several passes.
    """
    groups = model.groups()
    stepped = [p for _, p in groups["W"] + groups["head"] + groups["pi"]]
    theta = [p for _, p in groups["theta"]]
    opt, theta_opt = optimizers or pass_optimizers(model, lrs, lr_factor)
    meta_named = model.meta_parameters()
    all_params = stepped + theta
    rng = torch.Generator().manual_seed(mix_seed(seed, 17))
    stats = PassStats()

    set_image = model.set_image(task.flat_inputs) if model.masker.set_dependent else None
    stats.encodes += set_image is not None
    theta_acc = [torch.zeros_like(p) for p in theta]
    batches = minibatches(task, cfg.minibatch, seed)
    last_grads: dict[str, torch.Tensor] = {}
    for j, mb in enumerate(batches):
        last = j == len(batches) - 1
        masks, _ = generate_masks(model.net, model.masker, set_image, "relaxed", rng)
        loss, ce, kl = task_objective(model, mb.inputs, mb.labels, masks, cfg.kl_scale, cfg.kl_denominator)
        if not torch.isfinite(loss):
            raise AdaptationError(f"non-finite loss at minibatch {j}: ce={ce.item()}, kl={kl.item()}")
        grads = torch.autograd.grad(loss, all_params, retain_graph=not last, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(all_params, grads)]
        if not all(torch.isfinite(g).all() for g in grads):
            raise AdaptationError(f"non-finite gradient at minibatch {j}")
        by_param = {id(p): g for p, g in zip(all_params, grads)}
        if last:
            last_grads = {n: by_param[id(p)].detach().clone() for n, p in meta_named}
        for p, g in zip(stepped, grads[:len(stepped)]):
            p.grad = g
        opt.step()
        opt.zero_grad(set_to_none=True)
        for acc, g in zip(theta_acc, grads[len(stepped):]):
            acc += g
        stats.losses.append(loss.item())
        stats.ces.append(ce.item())
        stats.kls.append(kl.item())
    if theta_opt is not None:
        for p, acc in zip(theta, theta_acc):
            p.grad = acc / len(batches)
        theta_opt.step()
        theta_opt.zero_grad(set_to_none=True)
    return last_grads, stats


def inner_adapt(model: StampModel, task: TaskBatch, cfg: TrainConfig, seed: int, head_state=None,
                lr_factor: float = 1.0, lrs: dict[str, float] | None = None):
    """Adapt a copy of ``model`` to one task; returns (adapted, last-minibatch gradient, stats)."""
    work = copy.deepcopy(model)
    if head_state is not None:
        if head_state["weight"].shape[0] != work.net.head_width:
            work.net.reset_head(head_width=head_state["weight"].shape[0])
        work.net.head.load_state_dict(head_state)
    grads, stats = adapt_pass(work, task, cfg, lrs or cfg.inner_lrs(), seed, lr_factor)
    if cfg.outer_mode == "reptile":
        adapted = dict(work.meta_parameters())
        grads = {n: (p.detach() - adapted[n].detach()) for n, p in model.meta_parameters()}
    return work, grads, stats


def meta_step(params: Sequence[torch.Tensor], task_grads: Sequence[Sequence[torch.Tensor]],
              lr: float | None = None, optimizer: torch.optim.Optimizer | None = None):
    """Apply ``phi <- phi - lr * sum_n g_n`` (or hand the summed gradient to ``optimizer``)."""
    if not task_grads:
        raise ValueError("meta_step needs at least one task gradient")
    with torch.no_grad():
        total = [torch.zeros_like(p) for p in params]
        for grads in task_grads:
            for t, g in zip(total, grads):
                t += g
        if optimizer is None:
            if lr is None:
                raise ValueError("give either lr or optimizer")
            for p, t in zip(params, total):
                p -= lr * t
        else:
            for p, t in zip(params, total):
                p.grad = t
            optimizer.step()
            optimizer.zero_grad(set_to_none=True)
    return params


def _outer_optimizer(model: StampModel, cfg: TrainConfig):
    groups = model.groups()
    base = cfg.outer_lrs()
    return torch.optim.Adam([{"params": [p for _, p in groups[k]], "lr": base[k], "name": k}
                             for k in GROUPS if groups[k]])


# -- supervised helpers -----------------------------------------------------

def _labels(dataset: Dataset) -> torch.Tensor:
    return dataset.remapped_labels()


@torch.no_grad()
def evaluate(net: MaskableNetwork, dataset: Dataset, masks=None, batch: int = 256, labels=None) -> float:
    net.eval()
    labels = _labels(dataset) if labels is None else labels
    correct = 0
    dtype = net.head.weight.dtype
    for s in range(0, len(dataset), batch):
        logits = net(dataset.inputs[s:s + batch].to(dtype), masks)
        correct += (logits.argmax(1) == labels[s:s + batch]).sum().item()
    net.train()
    return correct / len(dataset)


@torch.no_grad()
def inference_time(net: MaskableNetwork, dataset: Dataset, batch: int = 256, warmup: int = 3, repeats: int = 5) -> float:
    """Mean wall time of one forward sweep over ``dataset`` (warm-up sweeps excluded)."""
    dtype = net.head.weight.dtype

    def sweep():
        for s in range(0, len(dataset), batch):
            net(dataset.inputs[s:s + batch].to(dtype))

    for _ in range(warmup):
        sweep()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        sweep()
        times.append(time.perf_counter() - t0)
    return sum(times) / len(times)


def supervised_train(net: MaskableNetwork, train: Dataset, epochs: int, lr: float, batch: int, seed: int,
                     optimizer: str = "adam", momentum: float = 0.9, weight_decay: float = 5e-4,
                     masks=None) -> list[float]:
    """Plain minibatch training (SGD with momentum and cosine decay, or Adam)."""
    if epochs == 0:
        return []
    labels = _labels(train)
    dtype = net.head.weight.dtype
    if optimizer == "sgd":
        opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    else:
        opt = torch.optim.Adam(net.parameters(), lr=lr)
    steps_per_epoch = -(-len(train) // batch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, epochs * steps_per_epoch))
    g = torch.Generator().manual_seed(seed)
    losses = []
    net.train()
    for _ in range(epochs):
        perm = torch.randperm(len(train), generator=g)
        total = 0.0
        for s in range(0, len(train), batch):
            idx = perm[s:s + batch]
            loss = F.cross_entropy(net(train.inputs[idx].to(dtype), masks), labels[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError("training diverged (non-finite loss)")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        losses.append(total / len(train))
    return losses


def pretrain_reference(model: StampModel, reference: Dataset, cfg: TrainConfig, seed: int) -> list[float]:
    """Supervised pre-training of the backbone on all reference classes (one shared head)."""
    if cfg.pretrain_epochs == 0:
        return []
    net = model.net
    saved_width = net.head_width
    net.reset_head(torch.Generator().manual_seed(mix_seed(seed, 3)), head_width=len(reference.class_ids))
    losses = supervised_train(net, reference, cfg.pretrain_epochs, cfg.pretrain_lr, 64, seed, optimizer="adam")
    net.reset_head(torch.Generator().manual_seed(mix_seed(seed, 4)), head_width=saved_width)
    return losses


def finetune(net: MaskableNetwork, train: Dataset, test: Dataset, epochs: int, cfg: TrainConfig, seed: int
             ) -> tuple[MaskableNetwork, dict]:
    """Train an extracted compact network without masks; report accuracy and wall times."""
    t0 = time.perf_counter()
    losses = supervised_train(net, train, epochs, cfg.finetune_lr, cfg.finetune_batch, seed,
                              momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    elapsed = time.perf_counter() - t0
    metrics = {
        "accuracy": evaluate(net, test),
        "finetune_time_s": elapsed,
        "inference_time_s": inference_time(net, test),
        "epochs": epochs,
        "final_loss": losses[-1] if losses else None,
    }
    return net, metrics


# -- meta-training ----------------------------------------------------------

@dataclass
class MetaTrainResult:
    model: StampModel
    heads: dict[int, dict]
    lr_history: list[dict[str, float]]
    log: list[dict]
    meta_time_s: float = 0.0
    pretrain_time_s: float = 0.0


def _kept_ratio(model: StampModel, flat_inputs) -> float:
    with torch.no_grad():
        em = model.masks(flat_inputs, "expected")
        arch, _ = architecture_from_masks(model.net, em, model.masker.threshold)
    return arch.params_ratio


def meta_train(cfg: TrainConfig, reference: Dataset, split: TaskSplit, model: StampModel | None = None,
               arch: str = "mini_vgg", dtype=torch.float32, checkpoint_dir=None, log_path=None,
               progress=None) -> MetaTrainResult:
    """First-order meta-training over the reference task groups."""
    torch.manual_seed(cfg.seed)
    head_width = len(split.reference_tasks[0])
    if model is None:
        model = build_stamp_model(arch, reference.image_shape, head_width, cfg, cfg.seed, dtype)
    t0 = time.perf_counter()
    pretrain_reference(model, reference.select_classes(sorted(c for g in split.reference_tasks for c in g)),
                       cfg, cfg.seed)
    pretrain_time = time.perf_counter() - t0

    heads: dict[int, dict] = {}
    for n in range(cfg.tasks):
        model.net.reset_head(torch.Generator().manual_seed(mix_seed(cfg.seed, 100 + n)),
                             head_width=len(split.reference_tasks[n]))
        heads[n] = copy.deepcopy(model.net.head.state_dict())

    outer = _outer_optimizer(model, cfg)
    base = cfg.outer_lrs()
    meta_named = model.meta_parameters()
    lr_history, records = [], []
    log_file = open(log_path, "a") if log_path else None
    t1 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            factor = cfg.lr_factor(epoch)
            for group in outer.param_groups:
                group["lr"] = base[group["name"]] * factor
            lr_history.append({k: base[k] * factor for k in GROUPS})
            tasks = sample_tasks(reference, split, cfg.tasks, cfg.per_class, mix_seed(cfg.seed, epoch))
            task_grads = []
            for n, task in enumerate(tasks):
                work, grads, stats = inner_adapt(model, task, cfg, mix_seed(cfg.seed, epoch, n), heads[n], factor)
                heads[n] = copy.deepcopy(work.net.head.state_dict())
                task_grads.append([grads[name] for name, _ in meta_named])
                rec = {"epoch": epoch, "task": n, "loss": stats.losses[-1], "kl": stats.kls[-1],
                       "kept_ratio": _kept_ratio(work, task.flat_inputs)}
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
            if cfg.outer_mode == "reptile":
                meta_step([p for _, p in meta_named], task_grads, lr=factor / max(1, len(task_grads)))
            else:
                meta_step([p for _, p in meta_named], task_grads, optimizer=outer)
            if progress:
                progress(epoch, records[-len(tasks):])
            if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                from .checkpoint import save_stamp
                save_stamp(model, checkpoint_dir, step=epoch + 1, seed=cfg.seed, extra={"train_config": cfg.to_dict()})
    finally:
        if log_file:
            log_file.close()
    return MetaTrainResult(model, heads, lr_history, records, time.perf_counter() - t1, pretrain_time)


@torch.no_grad()
def reference_accuracy(result: MetaTrainResult, reference_test: Dataset, split: TaskSplit, cfg: TrainConfig,
                       reference_train: Dataset | None = None) -> list[float]:
    """Accuracy on held-out instances of each reference task under expected masks and its own head."""
    accs = []
    model = copy.deepcopy(result.model)
    src = reference_train or reference_test
    for n, group in enumerate(split.reference_tasks[:cfg.tasks]):
        task = sample_task(src, group, min(cfg.per_class, min(len(src.indices_of(c)) for c in group)),
                           torch.Generator().manual_seed(mix_seed(cfg.seed, 9000 + n)))
        masks = model.masks(task.flat_inputs, "expected")
        head = result.heads[n]
        model.net.reset_head(head_width=head["weight"].shape[0])
        model.net.head.load_state_dict(head)
        accs.append(evaluate(model.net, reference_test.select_classes(group), masks))
    return accs


# -- target pruning ---------------------------------------------------------

@dataclass
class PruneResult:
    model: StampModel
    arch: PrunedArchitecture
    expected_masks: dict[str, torch.Tensor]
    task: TaskBatch
    search_time_s: float
    repaired: list[str]
    losses: list[float]


def sample_target_task(target: Dataset, per_class: int, seed: int) -> TaskBatch:
    per_class = min(per_class, min(len(target.indices_of(c)) for c in target.class_ids))
    return sample_task(target, target.class_ids, per_class, torch.Generator().manual_seed(mix_seed(seed, 55)))


def prune_target(model: StampModel, target: Dataset, K: int, cfg: TrainConfig, seed: int,
                 task: TaskBatch | None = None) -> PruneResult:
    """K adaptation epochs on a sampled target batch, then threshold the expected masks."""
    if K < 0:
        raise ValueError("K must be >= 0")
    t0 = time.perf_counter()
    work = copy.deepcopy(model)
    work.net.reset_head(torch.Generator().manual_seed(mix_seed(seed, 77)), head_width=len(target.class_ids))
    task = task or sample_target_task(target, cfg.per_class, seed)
    losses = []
    optimizers = pass_optimizers(work, cfg.prune_lrs())
    for k in range(K):
        _, stats = adapt_pass(work, task, cfg, cfg.prune_lrs(), mix_seed(seed, 1000 + k), optimizers=optimizers)
        losses.extend(stats.losses)
    with torch.no_grad():
        em = work.masks(task.flat_inputs, "expected")
        arch, repaired = architecture_from_masks(work.net, em, work.masker.threshold)
    if repaired:
        log.warning("keep-one repair applied to layers %s", repaired)
    return PruneResult(work, arch, em, task, time.perf_counter() - t0, repaired, losses)


def compact_network(pruned: PruneResult, fold: bool = True) -> MaskableNetwork:
    """Extract the kept channels; optionally fold expected mask values into the weights first."""
    net = fold_masks(pruned.model.net, pruned.expected_masks) if fold else pruned.model.net
    return extract_subnetwork(net, pruned.arch)
