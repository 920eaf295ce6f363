"""Checkpoint files: a text header followed by little-endian float32 tensors.

Layout::

    CROMOTEX-CKPT <version>\\n
    <one line of JSON: config, metadata, frozen prefixes, tensor manifest>\\n
    <tensor bytes, concatenated in manifest order>

Each manifest entry carries ``name``, ``shape``, ``offset`` and ``nbytes``;
offsets count from the first byte after the header. Optimizer moments are
stored as ordinary tensors named ``optim.m/<param>`` and ``optim.v/<param>``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ModelParams
from .optim import OptimizerState

CKPT_MAGIC = b"CROMOTEX-CKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, config: Optional[dict] = None, meta: Optional[dict] = None,
                    optimizer: Optional[OptimizerState] = None) -> None:
    tensors = dict(params)
    opt_header = None
    if optimizer is not None:
        opt_header = {"step": optimizer.step, **optimizer.hyperparameters()}
        for name in optimizer.m:
            tensors[f"optim.m/{name}"] = optimizer.m[name]
            tensors[f"optim.v/{name}"] = optimizer.v[name]
    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": CKPT_VERSION,
        "config": config or {},
        "meta": meta or {},
        "frozen": sorted(getattr(params, "frozen", ())),
        "optimizer": opt_header,
        "tensors": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + b" " + str(CKPT_VERSION).encode() + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for chunk in chunks:
            fh.write(chunk)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        first = fh.readline()
        if not first.startswith(CKPT_MAGIC):
            raise CheckpointError(f"{path}: not a checkpoint file")
        return json.loads(fh.readline())


def load_checkpoint(path):
    """Return ``(params, header, optimizer_state_or_None)``."""
    blob = Path(path).read_bytes()
    first_nl = blob.find(b"\n")
    if first_nl < 0 or not blob.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int(blob[len(CKPT_MAGIC) + 1 : first_nl])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    second_nl = blob.find(b"\n", first_nl + 1)
    header = json.loads(blob[first_nl + 1 : second_nl])
    data = memoryview(blob)[second_nl + 1 :]
    params = ModelParams(frozen=header.get("frozen", ()))
    moments = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(f"{path}: truncated tensor {entry['name']!r}")
        arr = np.frombuffer(data[entry["offset"] : end], dtype="<f4").astype(np.float32)
        arr = arr.reshape(entry["shape"])
        if entry["name"].startswith("optim."):
            moments[entry["name"]] = arr
        else:
            params[entry["name"]] = arr
    optimizer = None
    if header.get("optimizer"):
        opt = dict(header["optimizer"])
        step = opt.pop("step")
        optimizer = OptimizerState(step=step, **opt)
        for key, arr in moments.items():
            kind, name = key[len("optim."):].split("/", 1)
            (optimizer.m if kind == "m" else optimizer.v)[name] = arr
    return params, header, optimizer
