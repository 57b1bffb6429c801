"""Parameter containers shared by the encoder and the tracker."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class Module:
    """Anything holding parameters; names follow attribute insertion order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"weight names differ: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: stored shape {state[name].shape} != model shape {p.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr.astype(np.float32), requires_grad=True)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, zero: bool = False):
        bound = 1.0 / np.sqrt(din)
        w = np.zeros((dout, din)) if zero else rng.uniform(-bound, bound, (dout, din))
        self.weight = _param(w)
        self.bias = _param(np.zeros(dout))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.dense(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator):
        fan_in = cin * k * k
        self.weight = _param(rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k)))
        self.bias = _param(np.zeros(cout))
        self.k = k

    def __call__(self, x: Tensor, stride: int = 1) -> Tensor:
        return tn.conv2d(x, self.weight, self.bias, stride=stride, padding=self.k // 2)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.weight, self.bias)
