"""Parameter containers: dataclasses whose Tensor fields are the learnable weights."""

from __future__ import annotations

import dataclasses

import numpy as np

from .tensor import Tensor


def uniform(rng: np.random.Generator, shape, fan_in: int, trainable: bool = True) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=trainable)


def constant(value: float, shape, trainable: bool = True) -> Tensor:
    return Tensor(np.full(shape, value, dtype=float), requires_grad=trainable)


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten the Tensor fields of a (possibly nested) params dataclass."""
    out: dict[str, Tensor] = {}
    if obj is None:
        return out
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        name = f"{prefix}{f.name}"
        if isinstance(val, Tensor):
            out[name] = val
        elif dataclasses.is_dataclass(val):
            out.update(named_tensors(val, name + "."))
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                if isinstance(item, Tensor):
                    out[f"{name}.{i}"] = item
                elif dataclasses.is_dataclass(item):
                    out.update(named_tensors(item, f"{name}.{i}."))
    return out


def set_trainable(obj, flag: bool) -> None:
    for t in named_tensors(obj).values():
        t.requires_grad = flag
