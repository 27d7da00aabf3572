"""Datasets, class splits and balanced task sampling.

Images are stored as ``float`` tensors ``[N, C, H, W]`` in ``[0, 1]``.  A
:class:`TaskBatch` is a class-balanced subset of a dataset whose labels have
been remapped to ``0..k-1``; its ``flat_inputs`` are what the set encoder
consumes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch


class DatasetError(ValueError):
    """Raised for malformed dataset directories or impossible sampling requests."""


@dataclass
class Dataset:
    inputs: torch.Tensor
    labels: torch.Tensor
    class_ids: list[int]
    name: str = "dataset"

    def __post_init__(self):
        if self.inputs.ndim != 4:
            raise DatasetError(f"inputs must be [N, C, H, W], got {tuple(self.inputs.shape)}")
        if len(self.inputs) < 1:
            raise DatasetError("dataset is empty")
        if len(self.labels) != len(self.inputs):
            raise DatasetError("labels and inputs differ in length")
        unknown = set(torch.unique(self.labels).tolist()) - set(self.class_ids)
        if unknown:
            raise DatasetError(f"labels outside declared class set: {sorted(unknown)}")
        if not torch.isfinite(self.inputs).all():
            raise DatasetError("inputs contain non-finite values")
        self.class_ids = sorted(int(c) for c in self.class_ids)

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.inputs.shape[1:])

    @property
    def input_dim(self) -> int:
        c, h, w = self.image_shape
        return c * h * w

    def indices_of(self, class_id: int) -> torch.Tensor:
        return torch.nonzero(self.labels == class_id, as_tuple=False).flatten()

    def subset(self, indices, name: str | None = None) -> "Dataset":
        indices = torch.as_tensor(indices, dtype=torch.long)
        labels = self.labels[indices]
        present = sorted(set(labels.tolist()))
        return Dataset(self.inputs[indices], labels, present, name or self.name)

    def select_classes(self, class_ids: Sequence[int], name: str | None = None) -> "Dataset":
        mask = torch.zeros(len(self), dtype=torch.bool)
        for c in class_ids:
            mask |= self.labels == c
        idx = torch.nonzero(mask, as_tuple=False).flatten()
        return Dataset(self.inputs[idx], self.labels[idx], sorted(class_ids), name or self.name)

    def remapped_labels(self) -> torch.Tensor:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        return torch.tensor([lookup[int(y)] for y in self.labels], dtype=torch.long)


@dataclass
class TaskBatch:
    inputs: torch.Tensor
    labels: torch.Tensor
    class_ids: list[int] = field(default_factory=list)
    indices: torch.Tensor | None = None

    @property
    def flat_inputs(self) -> torch.Tensor:
        return self.inputs.reshape(len(self.inputs), -1)

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class TaskSplit:
    reference_tasks: list[list[int]]
    target_class_ids: list[int]

    def __post_init__(self):
        seen: set[int] = set()
        for group in self.reference_tasks:
            if seen & set(group):
                raise DatasetError("reference task groups overlap")
            seen |= set(group)
        if seen & set(self.target_class_ids):
            raise DatasetError("target classes appear in a reference task")

    @classmethod
    def contiguous(cls, class_ids: Sequence[int], n_tasks: int, classes_per_task: int,
                   n_target: int) -> "TaskSplit":
        ids = sorted(class_ids)
        need = n_tasks * classes_per_task + n_target
        if need > len(ids):
            raise DatasetError(f"split needs {need} classes, dataset has {len(ids)}")
        groups = [ids[i * classes_per_task:(i + 1) * classes_per_task] for i in range(n_tasks)]
        start = n_tasks * classes_per_task
        return cls(groups, ids[start:start + n_target])


# -- container format -------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def save_dataset(dataset: Dataset, path, dtype: str = "f32") -> Path:
    """Write ``dataset`` in the manifest + raw little-endian layout."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arr = dataset.inputs.detach().cpu().numpy()
    if dtype == "u8":
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype("u1")
    elif dtype == "f32":
        arr = arr.astype("<f4")
    else:
        raise DatasetError(f"unsupported dtype {dtype!r}")
    arr.tofile(path / "inputs.bin")
    dataset.labels.cpu().numpy().astype("<i8").tofile(path / "labels.bin")
    manifest = {
        "name": dataset.name,
        "shape": list(arr.shape),
        "dtype": dtype,
        "inputs_file": "inputs.bin",
        "labels_file": "labels.bin",
        "class_ids": list(dataset.class_ids),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    try:
        shape = [int(s) for s in manifest["shape"]]
        dtype = _DTYPES[manifest["dtype"]]
        inputs_file = path / manifest["inputs_file"]
        labels_file = path / manifest["labels_file"]
        class_ids = [int(c) for c in manifest["class_ids"]]
    except KeyError as exc:
        raise DatasetError(f"manifest missing field or bad dtype: {exc}") from exc
    if len(shape) != 4:
        raise DatasetError(f"shape must be [N, C, H, W], got {shape}")

    raw = np.fromfile(inputs_file, dtype=dtype)
    if raw.size != math.prod(shape):
        raise DatasetError(
            f"shape mismatch: manifest declares {math.prod(shape)} values, "
            f"{inputs_file.name} holds {raw.size}")
    # labels are int64 unless the byte count says int32 or uint8
    nbytes = labels_file.stat().st_size
    label_dtype = {8: "<i8", 4: "<i4", 1: "u1"}.get(nbytes // max(shape[0], 1))
    if label_dtype is None or nbytes % shape[0]:
        raise DatasetError(f"shape mismatch: {labels_file.name} has {nbytes} bytes for {shape[0]} labels")
    labels = np.fromfile(labels_file, dtype=label_dtype).astype(np.int64)

    inputs = raw.reshape(shape).astype(np.float32)
    if manifest["dtype"] == "u8":
        inputs = inputs / 255.0
    return Dataset(torch.from_numpy(inputs), torch.from_numpy(labels), class_ids,
                   manifest.get("name", path.name))


# -- synthetic data ---------------------------------------------------------

def make_synthetic_dataset(seed: int, classes: int, per_class: int, H: int = 16, W: int = 16,
                           noise: float = 0.35, name: str | None = None) -> Dataset:
    """Class-conditional oriented gratings with random phase, jitter and noise.

    Each class owns an orientation, a spatial frequency and a blob centre.
    Phase is random per image, so no fixed linear template separates the
    classes; a small CNN learns the local orientation/frequency detectors.
    """
    if classes < 2:
        raise DatasetError("classes must be >= 2")
    if per_class < 1 or H < 4 or W < 4:
        raise DatasetError("per_class must be >= 1 and images at least 4x4")
    rng = np.random.default_rng(seed)
    # class prototypes: orientations spread over [0, pi) with jitter
    angles = (np.arange(classes) * np.pi / classes + rng.uniform(0, np.pi / classes)) % np.pi
    freqs = rng.uniform(0.15, 0.4, size=classes)
    centres = rng.uniform(0.3, 0.7, size=(classes, 2))
    rng.shuffle(angles)

    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    images = np.empty((classes * per_class, 1, H, W), dtype=np.float32)
    labels = np.repeat(np.arange(classes), per_class)
    for i, c in enumerate(labels):
        a = angles[c] + rng.normal(0, 0.08)
        f = freqs[c] * (1 + rng.normal(0, 0.05))
        phase = rng.uniform(0, 2 * np.pi)
        u = (xx * W) * np.cos(a) + (yy * H) * np.sin(a)
        grating = np.sin(2 * np.pi * f * u + phase)
        cy, cx = centres[c] + rng.normal(0, 0.08, size=2)
        envelope = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.3 ** 2))
        img = 0.5 + 0.4 * grating * envelope + noise * rng.normal(size=(H, W)) * 0.5
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)),
                   list(range(classes)), name or f"synthetic-s{seed}")


def train_test_split(dataset: Dataset, test_per_class: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Per-class holdout split; deterministic in ``seed``."""
    g = torch.Generator().manual_seed(seed)
    train_idx, test_idx = [], []
    for c in dataset.class_ids:
        idx = dataset.indices_of(c)
        if len(idx) <= test_per_class:
            raise DatasetError(f"class {c} has {len(idx)} instances, cannot hold out {test_per_class}")
        perm = idx[torch.randperm(len(idx), generator=g)]
        test_idx.append(perm[:test_per_class])
        train_idx.append(perm[test_per_class:])
    train = dataset.subset(torch.cat(train_idx).sort().values, f"{dataset.name}-train")
    test = dataset.subset(torch.cat(test_idx).sort().values, f"{dataset.name}-test")
    train.class_ids = test.class_ids = list(dataset.class_ids)
    return train, test


def limit_per_class(dataset: Dataset, per_class: int, seed: int = 0) -> Dataset:
    """Keep at most ``per_class`` instances of every class (for data-size studies)."""
    g = torch.Generator().manual_seed(seed)
    keep = []
    for c in dataset.class_ids:
        idx = dataset.indices_of(c)
        keep.append(idx[torch.randperm(len(idx), generator=g)[:per_class]])
    out = dataset.subset(torch.cat(keep).sort().values, dataset.name)
    out.class_ids = list(dataset.class_ids)
    return out


# -- task sampling ----------------------------------------------------------

def sample_task(dataset: Dataset, class_ids: Sequence[int], per_class: int,
                generator: torch.Generator) -> TaskBatch:
    chosen = []
    for c in class_ids:
        idx = dataset.indices_of(c)
        if len(idx) < per_class:
            raise DatasetError(f"insufficient instances for class {c}: have {len(idx)}, need {per_class}")
        chosen.append(idx[torch.randperm(len(idx), generator=generator)[:per_class]])
    indices = torch.cat(chosen)
    lookup = {c: i for i, c in enumerate(class_ids)}
    labels = torch.tensor([lookup[int(y)] for y in dataset.labels[indices]], dtype=torch.long)
    return TaskBatch(dataset.inputs[indices], labels, list(class_ids), indices)


def sample_tasks(dataset: Dataset, split: TaskSplit, n_tasks: int, per_class: int,
                 rng_seed: int) -> list[TaskBatch]:
    """One balanced batch per reference group, ``B = classes_per_task * per_class``."""
    if n_tasks > len(split.reference_tasks):
        raise DatasetError(f"requested {n_tasks} tasks, split has {len(split.reference_tasks)} groups")
    tasks = []
    for n, group in enumerate(split.reference_tasks[:n_tasks]):
        g = torch.Generator().manual_seed(mix_seed(rng_seed, n))
        tasks.append(sample_task(dataset, group, per_class, g))
    return tasks


def minibatches(task: TaskBatch, batch_size: int, rng_seed: int) -> list[TaskBatch]:
    """Shuffled disjoint cover of ``task``; the final short fragment is kept."""
    if batch_size < 1:
        raise DatasetError("batch_size must be positive")
    g = torch.Generator().manual_seed(rng_seed)
    perm = torch.randperm(len(task), generator=g)
    out = []
    for start in range(0, len(task), batch_size):
        idx = perm[start:start + batch_size]
        src = task.indices[idx] if task.indices is not None else idx
        out.append(TaskBatch(task.inputs[idx], task.labels[idx], task.class_ids, src))
    return out


def mix_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([abs(int(p)) for p in parts]).generate_state(1)[0])

