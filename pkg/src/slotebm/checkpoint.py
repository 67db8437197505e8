"""Portable checkpoint container: JSON manifest plus named raw arrays.

Layout (little-endian; see docs/checkpoint_format.md):

    magic     8 bytes  b"SLOTCKPT"
    manifest  u32 length + UTF-8 JSON
    payload   arrays back-to-back, row-major, little-endian

The manifest carries the format version, training step, rng seed, the model
and sampler hyperparameters needed to rebuild the network, and one entry per
array (name, dtype, shape, offset, nbytes). A SHA-256 digest of the payload
is verified on load, and every array's declared shape is checked against its
byte extent.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .energy import EnergyConfig
from .model import ModelConfig, SlotEnergyModel
from .sampler import SamplerConfig

MAGIC = b"SLOTCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file, bad checksum, or shape mismatch."""


def model_config_to_dict(config: ModelConfig) -> dict:
    return dataclasses.asdict(config)


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["energy"] = EnergyConfig(**d["energy"])
    return ModelConfig(**d)


def sampler_config_from_dict(d: dict) -> SamplerConfig:
    return SamplerConfig(**d)


def _named_arrays(
    model: SlotEnergyModel, optimizer: torch.optim.Optimizer | None
) -> dict[str, np.ndarray]:
    arrays = {
        f"model/{name}": tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    if optimizer is not None:
        id_to_name = {id(p): n for n, p in model.named_parameters()}
        for param, state in optimizer.state.items():
            name = id_to_name.get(id(param))
            if name is None:
                continue
            for key, value in state.items():
                if isinstance(value, torch.Tensor):
                    arrays[f"optim/{name}/{key}"] = value.detach().cpu().numpy()
    return arrays


def save_checkpoint(
    path: str | Path,
    model: SlotEnergyModel,
    *,
    step: int = 0,
    seed: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> None:
    """Atomically write a checkpoint (temp file then rename)."""
    arrays = _named_arrays(model, optimizer)
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": le.dtype.str,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "seed": int(seed),
        "model_config": model_config_to_dict(model.config),
        "sampler_config": dataclasses.asdict(model.sampler_config),
        "arrays": entries,
        "checksum": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(bytes(payload))
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Load manifest and arrays, verifying checksum and declared shapes."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        payload = f.read()
    if hashlib.sha256(payload).hexdigest() != manifest["checksum"]:
        raise CheckpointError(f"{path}: payload checksum mismatch, file is corrupt")
    arrays = {}
    for entry in manifest["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != entry["nbytes"]:
            raise CheckpointError(
                f"{path}: array {entry['name']} declares shape {shape} "
                f"({expected} bytes) but stores {entry['nbytes']} bytes"
            )
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: array {entry['name']} is truncated")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return manifest, arrays


def load_model(path: str | Path) -> tuple[SlotEnergyModel, dict, dict[str, np.ndarray]]:
    """Rebuild the model from a checkpoint; returns (model, manifest, arrays)."""
    manifest, arrays = read_checkpoint(path)
    model = SlotEnergyModel(
        model_config_from_dict(manifest["model_config"]),
        sampler_config_from_dict(manifest["sampler_config"]),
    )
    state = {
        name[len("model/") :]: torch.from_numpy(arr)
        for name, arr in arrays.items()
        if name.startswith("model/")
    }
    model.load_state_dict(state)
    model.eval()
    return model, manifest, arrays


def restore_optimizer(
    optimizer: torch.optim.Optimizer, model: SlotEnergyModel, arrays: dict[str, np.ndarray]
) -> bool:
    """Load Adam moments back into an optimizer; returns False if none stored."""
    name_to_param = dict(model.named_parameters())
    found = False
    for name, param in name_to_param.items():
        prefix = f"optim/{name}/"
        entries = {
            key[len(prefix) :]: torch.from_numpy(arr)
            for key, arr in arrays.items()
            if key.startswith(prefix)
        }
        if entries:
            optimizer.state[param] = entries
            found = True
    return found
