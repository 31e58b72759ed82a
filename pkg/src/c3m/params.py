"""Parameter containers shared by the trainable modules."""

from __future__ import annotations

import dataclasses

import numpy as np

from .numerics import Tensor, parameter


class ParamGroup:
    """Mixin for dataclasses whose fields are tensors or nested groups."""

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                out[name] = value
            elif isinstance(value, ParamGroup):
                out.update(value.named(name + "."))
            elif isinstance(value, dict):
                for key in sorted(value):
                    item = value[key]
                    if isinstance(item, ParamGroup):
                        out.update(item.named(f"{name}.{key}."))
                    elif isinstance(item, Tensor):
                        out[f"{name}.{key}"] = item
        return out


def linear_init(rng: np.random.Generator, out_dim: int, in_dim: int) -> Tensor:
    bound = np.sqrt(1.0 / in_dim)
    return parameter(rng.uniform(-bound, bound, size=(out_dim, in_dim)))


def zeros(*shape: int) -> Tensor:
    return parameter(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return parameter(np.ones(shape))
