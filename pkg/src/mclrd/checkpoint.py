"""Versioned binary checkpoints.

Layout::

    b"MCLRDCKP"  magic
    u32          format version
    u64          header length
    header       UTF-8 JSON (sorted keys): kind, configs, toggles, tensor index, RNG state
    payload      float64 little-endian row-major tensors, in index order

JSON is written with sorted keys and no wall-clock fields, so equal models
give equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .config import ModelConfig, from_dict, to_dict
from .model import MCLRD, BaseModel

MAGIC = b"MCLRDCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _bank_tensors(model: MCLRD) -> dict[str, np.ndarray]:
    out = {}
    for key, bank in model.class_banks.items():
        for name, arr in bank.state().items():
            out[f"classbank.{key}.{name}"] = arr
    return out


def save(path, model, train_cfg=None, rng_state: dict | None = None, extra: dict | None = None) -> None:
    """Write ``model`` (a BaseModel or MCLRD) to ``path``."""
    if isinstance(model, MCLRD):
        kind, base = "adapt", model.base
        tensors = {k: v.data for k, v in model.named_parameters().items()}
        tensors.update(_bank_tensors(model))
    elif isinstance(model, BaseModel):
        kind, base = "pretrain", model
        tensors = {k: v.data for k, v in model.named_parameters().items()}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header: dict[str, Any] = {
        "kind": kind,
        "model_config": to_dict(base.cfg),
        "train_config": to_dict(train_cfg) if train_cfg is not None else None,
        "toggles": dict(model.toggles) if kind == "adapt" else None,
        "seed": getattr(model, "seed", None),
        "rng_state": rng_state,
        "tensors": index,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def read(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Header and named arrays, without building a model."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated file")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = _PREFIX.size + hlen
    header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    arrays = {}
    for ent in header["tensors"]:
        n = int(np.prod(ent["shape"], dtype=np.int64))
        lo = start + ent["offset"]
        if lo + 8 * n > len(raw):
            raise CheckpointError(f"{path}: payload for {ent['name']} is truncated")
        arrays[ent["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=lo).reshape(ent["shape"]).copy()
    return header, arrays


def _assign(named: dict, arrays: dict[str, np.ndarray], path) -> None:
    missing = sorted(set(named) - set(arrays))
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing[:5]}")
    for name, t in named.items():
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name]


def load(path):
    """Rebuild the checkpointed model; returns ``(model, header)``."""
    header, arrays = read(path)
    mcfg = from_dict(ModelConfig, header["model_config"])
    base = BaseModel(mcfg)
    _assign(base.named_parameters(), arrays, path)
    base.freeze()
    if header["kind"] == "pretrain":
        return base, header
    model = MCLRD(base, toggles=header["toggles"])
    _assign(model.trainable_named(), arrays, path)
    for key, bank in model.class_banks.items():
        bank.load_state({k: arrays[f"classbank.{key}.{k}"] for k in ("means", "counts", "cold_hits")})
    return model, header
