"""Seeded experiment runs: meta-train once per seed, then prune and fine-tune every arm."""
from __future__ import annotations

import copy
import logging
import time
import traceback
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from ..backbone import MaskableNetwork, PrunedArchitecture, count_costs, extract_subnetwork, make_architecture
from ..backbone import full_keep
from ..checkpoint import load_stamp
from ..data import Dataset, TaskSplit, limit_per_class, mix_seed, train_test_split
from ..meta import StampModel, compact_network, finetune, meta_train, prune_target, reference_accuracy
from .baselines import bbdropout, random_structured
from .config import ExperimentConfig

log = logging.getLogger(__name__)

ROW_FIELDS = ("method", "n_ok", "n_failed", "accuracy_mean", "accuracy_std", "params_kept_pct",
              "flops_ratio", "search_time_s", "finetune_time_s", "inference_time_s")


@dataclass
class ExperimentData:
    reference_train: Dataset
    reference_test: Dataset
    target_train: Dataset
    target_test: Dataset
    split: TaskSplit
    spare_target: Dataset | None = None


@dataclass
class ArmResult:
    method: str
    seed: int
    status: str = "ok"
    accuracy: float | None = None
    params_ratio: float | None = None
    flops_ratio: float | None = None
    params_kept: int | None = None
    flops_kept: int | None = None
    search_time_s: float = 0.0
    finetune_time_s: float = 0.0
    inference_time_s: float = 0.0
    keep_indices: dict[str, list[int]] | None = None
    error: str | None = None


@dataclass
class RunReport:
    name: str
    rows: list[dict]
    runs: list[ArmResult]
    config: dict
    meta: list[dict] = field(default_factory=list)
    widths: dict[str, int] = field(default_factory=dict)
    out_of_scope: tuple[str, ...] = ("SNIP", "Edge-Popup", "MetaPruning")

    def row(self, method: str) -> dict | None:
        return next((r for r in self.rows if r["method"] == method), None)

    def to_dict(self) -> dict:
        return {"name": self.name, "rows": self.rows, "runs": [r.__dict__ for r in self.runs],
                "config": self.config, "meta": self.meta, "widths": self.widths,
                "out_of_scope": list(self.out_of_scope)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["name"], d["rows"], [ArmResult(**r) for r in d["runs"]], d["config"], d.get("meta", []),
                   d.get("widths", {}), tuple(d.get("out_of_scope", ())))


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    """Split the dataset into reference tasks and unseen target classes."""
    ds = cfg.dataset.load()
    spare = None
    if cfg.target is None:
        split = TaskSplit.contiguous(ds.class_ids, cfg.train.tasks, cfg.classes_per_task, cfg.target_classes)
        target = ds.select_classes(split.target_class_ids, "target")
        rest = sorted(set(ds.class_ids) - set(split.target_class_ids)
                      - {c for g in split.reference_tasks for c in g})
        if len(rest) >= 2:
            spare = ds.select_classes(rest[:cfg.target_classes], "target-b")
    else:
        split = TaskSplit.contiguous(ds.class_ids, cfg.train.tasks, cfg.classes_per_task, 0)
        target = cfg.target.load()
    reference = ds.select_classes(sorted(c for g in split.reference_tasks for c in g), "reference")
    rtr, rte = train_test_split(reference, cfg.reference_test_per_class, seed=cfg.dataset.seed)
    ttr, tte = train_test_split(target, cfg.test_per_class, seed=cfg.dataset.seed)
    if cfg.target_train_per_class is not None:
        ttr = limit_per_class(ttr, cfg.target_train_per_class, seed=cfg.dataset.seed)
    if spare is not None:
        spare, _ = train_test_split(spare, min(cfg.test_per_class, len(spare) // len(spare.class_ids) - 1),
                                    seed=cfg.dataset.seed)
    return ExperimentData(rtr, rte, ttr, tte, split, spare)


def meta_model(cfg: ExperimentConfig, data: ExperimentData, seed: int) -> tuple[StampModel, dict]:
    """Meta-trained state for one seed (or the configured checkpoint)."""
    if cfg.checkpoint is not None:
        model, meta = load_stamp(cfg.checkpoint)
        return model, {"seed": seed, "checkpoint": cfg.checkpoint, "meta_time_s": 0.0}
    tcfg = replace(cfg.train, seed=seed)
    result = meta_train(tcfg, data.reference_train, data.split, arch=cfg.arch)
    info = {"seed": seed, "meta_time_s": result.meta_time_s, "pretrain_time_s": result.pretrain_time_s,
            "reference_accuracy": reference_accuracy(result, data.reference_test, data.split, tcfg,
                                                     data.reference_train)}
    return result.model, info


def _with_head(net: MaskableNetwork, width: int, seed: int) -> MaskableNetwork:
    net.reset_head(torch.Generator().manual_seed(mix_seed(seed, 88)), head_width=width)
    return net


def _finish(res: ArmResult, net: MaskableNetwork, arch: PrunedArchitecture, data: ExperimentData,
            cfg: ExperimentConfig, seed: int) -> ArmResult:
    _, metrics = finetune(net, data.target_train, data.target_test, cfg.train.finetune_epochs, cfg.train,
                          mix_seed(seed, 7))
    res.accuracy = metrics["accuracy"]
    res.finetune_time_s = metrics["finetune_time_s"]
    res.inference_time_s = metrics["inference_time_s"]
    res.params_ratio, res.flops_ratio = arch.params_ratio, arch.flops_ratio
    res.params_kept, res.flops_kept = arch.params_kept, arch.flops_kept
    res.keep_indices = arch.keep_indices
    return res


def run_arm(method: str, model: StampModel, data: ExperimentData, cfg: ExperimentConfig, seed: int) -> ArmResult:
    """Prune (or not) with one method, then fine-tune under the shared budget."""
    res = ArmResult(method, seed)
    n_classes = len(data.target_train.class_ids)
    torch.manual_seed(mix_seed(seed, 2))
    if method == "full":
        net = _with_head(copy.deepcopy(model.net), n_classes, seed)
        return _finish(res, net, make_architecture(net, full_keep(net)), data, cfg, seed)
    if method == "stamp":
        tcfg = replace(cfg.train, seed=seed)
        pruned = prune_target(model, data.target_train, tcfg.K, tcfg, seed)
        res.search_time_s = pruned.search_time_s
        net = compact_network(pruned)
        if cfg.stamp_structure:
            net.reset_parameters(mix_seed(seed, 5))
        return _finish(res, net, pruned.arch, data, cfg, seed)
    if method == "random":
        t0 = time.perf_counter()
        full = _with_head(copy.deepcopy(model.net), n_classes, seed)
        arch = random_structured(full, cfg.kappa, np.random.default_rng(mix_seed(seed, 9)),
                                 cfg.random_band, cfg.random_max_attempts)
        net = extract_subnetwork(full, arch)
        res.search_time_s = time.perf_counter() - t0
        return _finish(res, net, arch, data, cfg, seed)
    if method == "bbdropout":
        net, arch, info = bbdropout(data.target_train, cfg.train, cfg.bbdropout_epochs, seed, cfg.arch)
        res.search_time_s = info["search_time_s"]
        return _finish(res, net, arch, data, cfg, seed)
    raise ValueError(f"unknown method {method!r}")


def _safe_arm(method, model, data, cfg, seed) -> ArmResult:
    try:
        return run_arm(method, model, data, cfg, seed)
    except Exception as exc:  # recorded per arm, the run continues
        log.error("arm %s (seed %d) failed: %s", method, seed, exc)
        return ArmResult(method, seed, status="failed", error=f"{type(exc).__name__}: {exc}\n"
                                                              + traceback.format_exc(limit=3))


def aggregate(runs: list[ArmResult], methods) -> list[dict]:
    """One row per method: mean and population std over seeds of the successful runs."""
    rows = []
    for m in methods:
        ok = [r for r in runs if r.method == m and r.status == "ok"]
        failed = sum(r.method == m and r.status != "ok" for r in runs)
        row = {"method": m, "n_ok": len(ok), "n_failed": failed}
        if ok:
            acc = np.array([r.accuracy for r in ok])
            row.update(accuracy_mean=float(acc.mean()), accuracy_std=float(acc.std()),
                       params_kept_pct=100 * float(np.mean([r.params_ratio for r in ok])),
                       flops_ratio=float(np.mean([r.flops_ratio for r in ok])),
                       search_time_s=float(np.mean([r.search_time_s for r in ok])),
                       finetune_time_s=float(np.mean([r.finetune_time_s for r in ok])),
                       inference_time_s=float(np.mean([r.inference_time_s for r in ok])))
        else:
            row.update({k: None for k in ROW_FIELDS[3:]})
        rows.append(row)
    return rows


def run_experiment(cfg: ExperimentConfig, data: ExperimentData | None = None,
                   models: dict[int, StampModel] | None = None,
                   progress: Callable[[ArmResult], None] | None = None) -> RunReport:
    """Run every configured arm for every seed and aggregate the results.

    ``models`` maps seed to an already meta-trained state, skipping
    meta-training for that seed.
    """
    data = data or prepare_data(cfg)
    runs, meta, widths = [], [], {}
    for seed in cfg.seeds:
        if models is not None and seed in models:
            model, info = models[seed], {"seed": seed, "meta_time_s": 0.0, "reused": True}
        else:
            model, info = meta_model(cfg, data, seed)
        meta.append(info)
        widths = dict(model.net.widths)
        for method in cfg.methods:
            res = _safe_arm(method, model, data, cfg, seed)
            runs.append(res)
            if progress:
                progress(res)
    return RunReport(cfg.name, aggregate(runs, cfg.methods), runs, cfg.to_dict(), meta, widths)


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    return len(a & b) / len(a | b) if a | b else 1.0


def task_adaptivity(model: StampModel, first: Dataset, second: Dataset, cfg: ExperimentConfig, seed: int) -> dict:
    """Prune two target datasets from the same meta-learned state and compare the keep sets."""
    tcfg = replace(cfg.train, seed=seed)
    arch_a = prune_target(model, first, tcfg.K, tcfg, seed).arch
    arch_b = prune_target(model, second, tcfg.K, tcfg, seed).arch
    per_layer = {n: jaccard(arch_a.keep_indices[n], arch_b.keep_indices[n]) for n in arch_a.keep_indices}
    return {"jaccard": per_layer, "min_jaccard": min(per_layer.values()),
            "keep_a": arch_a.keep_indices, "keep_b": arch_b.keep_indices}


def data_size_study(cfg: ExperimentConfig, sizes=None, data: ExperimentData | None = None,
                    models: dict[int, StampModel] | None = None,
                    methods=("full", "stamp", "bbdropout")) -> dict:
    """Accuracy and search time of each method as the target training set shrinks.

    Returns ``{"sizes": [...], "runs": [...], "table": [...]}`` where the
    table holds per (method, size) medians over seeds.
    """
    data = data or prepare_data(cfg)
    sizes = sorted(sizes or cfg.data_sizes)
    available = min(len(data.target_train.indices_of(c)) for c in data.target_train.class_ids)
    if sizes[-1] > available:
        raise ValueError(f"size {sizes[-1]} exceeds the {available} target instances per class")
    models = dict(models or {})
    runs = []
    for seed in cfg.seeds:
        if seed not in models:
            models[seed], _ = meta_model(cfg, data, seed)
        for n in sizes:
            sub = replace(data, target_train=limit_per_class(data.target_train, n, seed=cfg.dataset.seed))
            for method in methods:
                res = _safe_arm(method, models[seed], sub, cfg, seed)
                runs.append({"size": n, **res.__dict__})
    table = []
    for method in methods:
        for n in sizes:
            sel = [r for r in runs if r["method"] == method and r["size"] == n and r["status"] == "ok"]
            table.append({"method": method, "size": n, "n_ok": len(sel),
                          "accuracy_median": float(np.median([r["accuracy"] for r in sel])) if sel else None,
                          "search_time_median_s": float(np.median([r["search_time_s"] for r in sel])) if sel else None,
                          "finetune_time_median_s": float(np.median([r["finetune_time_s"] for r in sel])) if sel else None})
    return {"sizes": sizes, "runs": runs, "table": table}


def check_costs(report: RunReport, net: MaskableNetwork) -> bool:
    """Re-derive every reported cost from its stored keep lists (exact integers)."""
    for r in report.runs:
        if r.status != "ok":
            continue
        if count_costs(net, r.keep_indices) != (r.params_kept, r.flops_kept):
            return False
    return True
