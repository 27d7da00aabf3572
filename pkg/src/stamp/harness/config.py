"""Experiment configuration: dataclasses plus a TOML loader.

Schema (every key optional; defaults shown by ``ExperimentConfig()``)::

    name = "desk"
    arch = "mini_vgg"
    methods = ["full", "stamp", "random", "bbdropout"]
    seeds = [0, 1, 2]
    outdir = "runs/desk"
    formats = ["csv", "json", "png"]
    kappa = 0.5                 # FLOPs budget: random-baseline constraint and report target
    classes_per_task = 2
    target_classes = 4
    test_per_class = 100
    stamp_structure = false     # re-initialise extracted weights before fine-tuning
    data_sizes = [25, 50, 100, 200]

    [dataset]                   # reference data (and target data unless [target] given)
    path = "data/digits"        # container directory; omit for synthetic data
    seed = 1
    classes = 14
    per_class = 300
    noise = 0.6

    [target]                    # optional separate target dataset, same keys as [dataset]

    [train]                     # any TrainConfig field
    epochs = 100
    kl_scale = 15.0
"""
from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ..data import Dataset, load_dataset, make_synthetic_dataset
from ..meta import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

METHODS = ("full", "stamp", "random", "bbdropout")
FORMATS = ("csv", "json", "png")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    path: str | None = None
    seed: int = 1
    classes: int = 14
    per_class: int = 300
    height: int = 16
    width: int = 16
    noise: float = 0.6

    def load(self) -> Dataset:
        if self.path is not None:
            return load_dataset(self.path)
        return make_synthetic_dataset(self.seed, self.classes, self.per_class, self.height, self.width,
                                      noise=self.noise)


def desk_train_config(**overrides) -> TrainConfig:
    """Training defaults sized for a single CPU core."""
    base = dict(epochs=100, pretrain_epochs=10, alpha=0.01, a_init=10.0, beta_init=0.5,
                lr_pi=0.05, outer_lr_pi=0.05, prune_lr_pi=0.09, finetune_epochs=20, finetune_lr=1e-3)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class ExperimentConfig:
    name: str = "desk"
    arch: str = "mini_vgg"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    target: DatasetSpec | None = None
    classes_per_task: int = 2
    target_classes: int = 4
    reference_test_per_class: int = 50
    test_per_class: int = 100
    target_train_per_class: int | None = None
    train: TrainConfig = field(default_factory=desk_train_config)
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (0, 1, 2)
    outdir: str = "runs/desk"
    formats: tuple[str, ...] = FORMATS
    kappa: float = 0.5
    random_band: tuple[float, float] = (0.4, 0.8)
    random_max_attempts: int = 2000
    bbdropout_epochs: int = 30
    stamp_structure: bool = False
    checkpoint: str | None = None
    data_sizes: tuple[int, ...] = (25, 50, 100, 200)

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.formats = tuple(self.formats)
        self.random_band = tuple(float(x) for x in self.random_band)
        self.data_sizes = tuple(int(s) for s in self.data_sizes)
        self.validate()

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
        bad = [f for f in self.formats if f not in FORMATS]
        if bad:
            raise ConfigError(f"unknown formats {bad}; choose from {list(FORMATS)}")
        if not 0 < self.kappa <= 1:
            raise ConfigError("kappa must lie in (0, 1]")
        lo, hi = self.random_band
        if not 0 < lo <= hi <= 1:
            raise ConfigError("random_band must satisfy 0 < low <= high <= 1")
        for spec in (self.dataset, self.target):
            if spec is not None and spec.path is not None and not Path(spec.path).exists():
                raise ConfigError(f"dataset path does not exist: {spec.path}")
        if self.checkpoint is not None and not Path(self.checkpoint).exists():
            raise ConfigError(f"checkpoint does not exist: {self.checkpoint}")
        if self.classes_per_task < 2 or self.target_classes < 2:
            raise ConfigError("tasks need at least two classes")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_dict()
        return json.loads(json.dumps(d))  # tuples become lists, as in a JSON echo

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" in raw:
            raw["dataset"] = _dataset_spec(raw["dataset"])
        if raw.get("target") is not None:
            raw["target"] = _dataset_spec(raw["target"])
        if "train" in raw:
            train = raw["train"]
            if not isinstance(train, TrainConfig):
                tfields = {f.name for f in dataclasses.fields(TrainConfig)}
                bad = set(train) - tfields
                if bad:
                    raise ConfigError(f"unknown train keys: {sorted(bad)}")
                train = desk_train_config(**train)
            raw["train"] = train
        return cls(**raw)


def _dataset_spec(raw) -> DatasetSpec:
    if isinstance(raw, DatasetSpec):
        return raw
    known = {f.name for f in dataclasses.fields(DatasetSpec)}
    bad = set(raw) - known
    if bad:
        raise ConfigError(f"unknown dataset keys: {sorted(bad)}")
    return DatasetSpec(**raw)


def load_config(path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Read a TOML file; ``overrides`` replace top-level keys after loading."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_dict(raw)
