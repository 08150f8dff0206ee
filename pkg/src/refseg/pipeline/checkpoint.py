"""Checkpoint format: flat little-endian float64 weight blob plus text
manifest (name, shape, offset), a config snapshot, and trainer state."""

from __future__ import annotations

import json
import os

import numpy as np

from .config import Config, config_to_text, config_from_text
from .model import Model

WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "manifest.txt"
CONFIG_FILE = "config.txt"
STATE_FILE = "state.txt"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str, model: Model, step: int = 0,
                    rng_state: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    named = model.named_parameters()
    offset = 0
    manifest_lines = []
    with open(os.path.join(path, WEIGHTS_FILE), "wb") as fh:
        for name, tensor in named:
            arr = np.ascontiguousarray(tensor.data, dtype="<f8")
            fh.write(arr.tobytes())
            shape = "x".join(str(s) for s in tensor.data.shape) or "scalar"
            manifest_lines.append(f"{name}\t{shape}\t{offset}")
            offset += arr.nbytes
    with open(os.path.join(path, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        fh.write("\n".join(manifest_lines) + "\n")
    with open(os.path.join(path, CONFIG_FILE), "w", encoding="utf-8") as fh:
        fh.write(config_to_text(model.config))
    state = {"step": step, "rng_state": _jsonable(rng_state)}
    with open(os.path.join(path, STATE_FILE), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(state, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def load_checkpoint(path: str) -> tuple[Model, int]:
    with open(os.path.join(path, CONFIG_FILE), "r", encoding="utf-8") as fh:
        config = config_from_text(fh.read())
    model = Model.init(config, np.random.Generator(np.random.PCG64(0)))

    with open(os.path.join(path, MANIFEST_FILE), "r", encoding="utf-8") as fh:
        entries = [line.split("\t") for line in fh.read().strip().splitlines()]
    blob = open(os.path.join(path, WEIGHTS_FILE), "rb").read()

    by_name = dict(model.named_parameters())
    if set(by_name) != {name for name, _, _ in entries}:
        missing = set(by_name) ^ {name for name, _, _ in entries}
        raise CheckpointError(f"manifest/model parameter mismatch: {sorted(missing)[:4]}")
    for name, shape_s, offset_s in entries:
        tensor = by_name[name]
        shape = () if shape_s == "scalar" else tuple(int(v) for v in shape_s.split("x"))
        if tuple(tensor.data.shape) != shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {shape}, model {tensor.data.shape}")
        count = int(np.prod(shape)) if shape else 1
        start = int(offset_s)
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        tensor.data = arr.reshape(shape).copy()

    with open(os.path.join(path, STATE_FILE), "r", encoding="utf-8") as fh:
        state = json.loads(fh.read())
    return model, int(state["step"])
