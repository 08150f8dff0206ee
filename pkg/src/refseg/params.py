"""Parameter initialisation and traversal helpers shared across modules."""

from __future__ import annotations

import dataclasses

import numpy as np

from .tensor import Tensor


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    """Xavier/Glorot uniform init: variance 2/(fan_in+fan_out).

    For 2-D weights fan is (rows, cols); for grouped 3-D weights
    ``(groups, cin, cout)`` the fan is computed per group.
    """
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 3:
        fan_in, fan_out = shape[1], shape[2]
    else:
        raise ValueError(f"xavier_uniform expects 2-D or 3-D shapes, got {shape}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def named_tensors(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Walk dataclasses/lists/tuples/dicts and yield (stable name, Tensor) pairs.

    Field order of dataclasses fixes the ordering, which makes checkpoints
    and optimizer state reproducible across runs.
    """
    out: list[tuple[str, Tensor]] = []
    if isinstance(obj, Tensor):
        out.append((prefix or "param", obj))
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            sub = f"{prefix}.{f.name}" if prefix else f.name
            out.extend(named_tensors(val, sub))
    elif isinstance(obj, (list, tuple)):
        for i, val in enumerate(obj):
            out.extend(named_tensors(val, f"{prefix}.{i}" if prefix else str(i)))
    elif isinstance(obj, dict):
        for k in obj:
            out.extend(named_tensors(obj[k], f"{prefix}.{k}" if prefix else str(k)))
    return out


def count_values(obj) -> int:
    return sum(t.size for _, t in named_tensors(obj))
