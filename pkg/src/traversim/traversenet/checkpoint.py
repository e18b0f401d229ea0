"""JSON checkpoints: {version, arch, tensors: {name: {shape, data}}}."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..io import atomic_write_bytes
from .arch import ArchConfig
from .model import NetworkParams

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_dict(params: NetworkParams, meta: dict | None = None) -> dict:
    doc = {
        "version": CHECKPOINT_VERSION,
        "arch": params.arch.to_dict(),
        "tensors": {
            name: {"shape": list(t.shape), "data": t.astype(np.float32).reshape(-1).tolist()}
            for name, t in params.tensors.items()
        },
    }
    if meta:
        doc["meta"] = meta
    return doc


def save_checkpoint(path, params: NetworkParams, meta: dict | None = None) -> None:
    atomic_write_bytes(Path(path), json.dumps(checkpoint_dict(params, meta), sort_keys=True).encode())


def load_checkpoint(path, arch: ArchConfig | None = None) -> NetworkParams:
    """Read a checkpoint; when ``arch`` is given the stored shapes must match it."""
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or not {"version", "arch", "tensors"} <= set(doc):
        raise CheckpointError(f"{path}: corrupt checkpoint (missing version/arch/tensors)")
    if doc["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc['version']}")
    stored = ArchConfig.from_dict(doc["arch"])
    target = arch or stored
    shapes = target.layer_shapes()
    tensors = {}
    for name, entry in doc["tensors"].items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float32)
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: corrupt checkpoint (tensor {name} has {data.size} values for shape {shape})")
        if name not in shapes:
            raise CheckpointError(f"{path}: shape error, tensor {name} is not part of architecture {target.label}")
        if shapes[name] != shape:
            raise CheckpointError(f"{path}: shape error for {name}: checkpoint {shape}, architecture {shapes[name]}")
        tensors[name] = data.reshape(shape)
    missing = sorted(set(shapes) - set(tensors))
    if missing:
        raise CheckpointError(f"{path}: shape error, checkpoint lacks tensors {missing}")
    return NetworkParams(target, tensors)


def load_checkpoint_meta(path) -> dict:
    doc = json.loads(Path(path).read_text())
    return doc.get("meta", {})
