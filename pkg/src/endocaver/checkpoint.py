"""Versioned checkpoint container.

Layout::

    ENDOCAVER-CKPT 1\\n
    <manifest length in bytes>\\n
    <JSON manifest>
    <little-endian float32 blobs>

The manifest echoes the model/train configs, the step counter and the data
order state, and lists every tensor as ``{name, group, shape, offset}`` with
offsets relative to the start of the blob section. Groups are ``param``,
``buffer``, ``adam_m`` and ``adam_v``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import EndoCaver, ModelConfig
from .nn import Module
from .optim import Adam

MAGIC = "ENDOCAVER-CKPT"
VERSION = 1
_LE32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict | None
    step: int
    rng: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    adam: dict | None = None
    extra: dict = field(default_factory=dict)

    def build_model(self) -> EndoCaver:
        model = EndoCaver(ModelConfig.from_dict(self.model_config))
        model.load_state_dict({**self.params, **self.buffers})
        return model


def save(path, model: Module, optimizer: Adam | None = None, step: int = 0, train_config: dict | None = None,
         rng: dict | None = None, extra: dict | None = None) -> Path:
    """Write a checkpoint atomically (temp file + rename), so a crash never leaves a torn file."""
    path = Path(path)
    entries, blobs, offset = [], [], 0

    def add(name: str, group: str, arr: np.ndarray) -> None:
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=_LE32).tobytes()
        entries.append({"name": name, "group": group, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    for name, p in model.named_parameters():
        add(name, "param", p.data)
    for name, b in model.named_buffers():
        add(name, "buffer", b)
    adam_meta = None
    if optimizer is not None:
        index = {id(p): n for n, p in model.named_parameters()}
        order = [index[id(p)] for p in optimizer.params]
        for name, m, v in zip(order, optimizer.m, optimizer.v):
            add(name, "adam_m", m)
            add(name, "adam_v", v)
        adam_meta = {"t": optimizer.t, "lr": optimizer.lr, "betas": [optimizer.beta1, optimizer.beta2],
                     "eps": optimizer.eps, "order": order}
    manifest = {
        "format": MAGIC, "version": VERSION, "dtype": "float32-le",
        "model_config": getattr(model, "cfg", None).to_dict() if hasattr(model, "cfg") else None,
        "train_config": train_config, "step": int(step), "rng": rng or {}, "adam": adam_meta,
        "extra": extra or {}, "tensors": entries,
    }
    head = json.dumps(manifest, indent=1, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"{MAGIC} {VERSION}\n{len(head)}\n".encode())
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def read_manifest(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        first = fh.readline().decode(errors="replace").split()
        if len(first) != 2 or first[0] != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        if int(first[1]) != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {first[1]}")
        try:
            size = int(fh.readline())
            manifest = json.loads(fh.read(size))
        except ValueError as exc:  # bad length line or torn JSON
            raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
        return manifest, fh.tell()


def load(path) -> Checkpoint:
    manifest, start = read_manifest(path)
    raw = Path(path).read_bytes()[start:]
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + 4 * n > len(raw):
            raise CheckpointError(f"truncated checkpoint: {e['name']} runs past the end of the file")
        arr = np.frombuffer(raw, dtype=_LE32, count=n, offset=e["offset"]).reshape(e["shape"])
        groups[e["group"]][e["name"]] = arr.astype(np.float32)
    adam = None
    if manifest.get("adam"):
        meta = manifest["adam"]
        adam = {**meta, "m": [groups["adam_m"][n] for n in meta["order"]],
                "v": [groups["adam_v"][n] for n in meta["order"]]}
    return Checkpoint(manifest["model_config"], manifest.get("train_config"), int(manifest["step"]),
                      manifest.get("rng", {}), groups["param"], groups["buffer"], adam, manifest.get("extra", {}))


def restore_optimizer(ckpt: Checkpoint, model: Module) -> Adam:
    """Adam over ``model``'s parameters in the saved order, with its moments reloaded."""
    if ckpt.adam is None:
        raise CheckpointError("checkpoint carries no optimizer state")
    params = dict(model.named_parameters())
    opt = Adam([params[n] for n in ckpt.adam["order"]], ckpt.adam["lr"], tuple(ckpt.adam["betas"]), ckpt.adam["eps"])
    opt.load_state({"t": ckpt.adam["t"], "m": ckpt.adam["m"], "v": ckpt.adam["v"]})
    return opt
