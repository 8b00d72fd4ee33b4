"""Parameter containers built on :mod:`dico.tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class; parameters and submodules are discovered from attributes.

    Discovery follows attribute assignment order, so parameter names and
    their ordering are stable across runs (checkpoints rely on this).
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        yield from self._named(prefix, seen)

    def _named(self, prefix, seen):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad and id(val) not in seen:
                    seen.add(id(val))
                    yield name, val
            elif isinstance(val, Module):
                yield from val._named(name + ".", seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._named(f"{name}.{i}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def normal(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return T.parameter(rng.normal(0.0, std, size=shape).astype(dtype))


def zeros(shape, dtype) -> Tensor:
    return T.parameter(np.zeros(shape, dtype=dtype))


class Linear(Module):
    """y = x W (+ b), W stored as ``[d_in, d_out]``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True):
        self.W = normal(rng, (d_in, d_out), 1.0 / np.sqrt(d_in), dtype)
        self.b = zeros((d_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T._affine(x, self.W)
        return y if self.b is None else y + self.b


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = T.parameter(np.ones(d, dtype=dtype))
        self.beta = zeros((d,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)
