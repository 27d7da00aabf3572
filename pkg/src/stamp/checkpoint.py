"""Checkpoints: one raw little-endian float32 file per tensor plus ``meta.json``."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch


def save_tensors(tensors: Mapping[str, torch.Tensor], path, meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        arr.tofile(path / f"{name}.bin")
        shapes[name] = list(arr.shape)
    doc = dict(meta or {})
    doc["tensors"] = shapes
    (path / "meta.json").write_text(json.dumps(doc, indent=2))
    return path


def load_tensors(path, dtype=torch.float32) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    tensors = {}
    for name, shape in meta["tensors"].items():
        raw = np.fromfile(path / f"{name}.bin", dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise ValueError(f"shape mismatch for tensor {name}: expected {shape}, file holds {raw.size} values")
        tensors[name] = torch.from_numpy(raw.reshape(shape).copy()).to(dtype)
    return tensors, meta


def save_stamp(model, path, step: int = 0, seed: int = 0, extra: Mapping | None = None) -> Path:
    """Serialise a :class:`~stamp.meta.StampModel` (backbone, mask params, encoder)."""
    net = model.net
    meta = {
        "arch_name": net.arch_name,
        "network": net.config(),
        "layer_specs": [vars(s) | {"out_hw": list(s.out_hw)} for s in net.layer_specs()],
        "masker": model.masker.config(),
        "encoder": model.encoder.config() if model.encoder is not None else None,
        "seed": seed,
        "step": step,
    }
    meta.update(extra or {})
    return save_tensors(model.state_dict(), path, meta)


def load_stamp(path, dtype=torch.float32):
    from .backbone import network_from_config
    from .mask_gen import MaskGenerator
    from .meta import StampModel
    from .set_encoder import SetEncoder

    tensors, meta = load_tensors(path, dtype)
    net = network_from_config(meta["network"], dtype)
    mcfg = meta["masker"]
    masker = MaskGenerator(mcfg["widths"], mcfg["alpha"], mcfg["eps"], mcfg["b_prior"], mcfg["sigma0"],
                           mcfg["tau"], mcfg["threshold"], mcfg["set_dependent"],
                           a_init=mcfg.get("a_init"), beta_init=mcfg.get("beta_init", 0.0), dtype=dtype)
    encoder = None
    if meta.get("encoder"):
        e = meta["encoder"]
        encoder = SetEncoder(e["dim"], e["heads"], e["r"], inducing_points=e.get("inducing_points")).to(dtype)
    model = StampModel(net, masker, encoder)
    model.load_state_dict(tensors)
    return model, meta


def save_network(net, path, step: int = 0, extra: Mapping | None = None) -> Path:
    meta = {"arch_name": net.arch_name, "network": net.config(),
            "layer_specs": [vars(s) | {"out_hw": list(s.out_hw)} for s in net.layer_specs()],
            "seed": net.seed, "step": step}
    meta.update(extra or {})
    return save_tensors(net.state_dict(), path, meta)


def load_network(path, dtype=torch.float32):
    from .backbone import network_from_config

    tensors, meta = load_tensors(path, dtype)
    net = network_from_config(meta["network"], dtype)
    net.load_state_dict(tensors)
    return net, meta
