"""Parameter containers: a tiny module system over :class:`Tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor owned by a module.

    ``kind`` is one of ``weight``, ``bias``, ``norm``, ``pos`` or ``scale`` and
    drives freeze policies and weight-decay masks.
    """

    __slots__ = ("kind",)

    def __init__(self, data: np.ndarray, kind: str = "weight"):
        super().__init__(np.ascontiguousarray(data), requires_grad=True, dtype=data.dtype)
        self.kind = kind


class Module:
    """Base class; parameters and submodules are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _init(rng: np.random.Generator | None, shape: tuple, std: float, dtype) -> np.ndarray:
    if rng is None or std == 0.0:
        # np.zeros is lazily backed, so shape-only models cost no memory
        return np.zeros(shape, dtype=dtype)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""

    def __init__(self, d_in: int, d_out: int, rng=None, std: float = 0.02, bias: bool = True, dtype=np.float32):
        self.weight = Parameter(_init(rng, (d_in, d_out), std, dtype), "weight")
        self.bias = Parameter(np.zeros(d_out, dtype=dtype), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, dtype=np.float32):
        self.weight = Parameter(np.ones(dim, dtype=dtype), "norm")
        self.bias = Parameter(np.zeros(dim, dtype=dtype), "norm")
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)
