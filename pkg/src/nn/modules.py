"""
Parameter containers. A `Module` finds its parameters by walking attributes
(tensors with requires_grad, sub-modules, lists of sub-modules), so the
dotted names double as checkpoint keys.
"""

from typing import Iterator

import numpy as np

from src.nn import functional as F
from src.nn.tensor import Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{name}", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in sorted(self.named_parameters())}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _walk(value, name: str, seen: set[int]) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        # Tied weights are reported once, under the first name reached.
        if value.requires_grad and id(value) not in seen:
            seen.add(id(value))
            yield name, value
    elif isinstance(value, Module):
        for sub_name, sub_value in vars(value).items():
            if not sub_name.startswith("_"):
                yield from _walk(sub_value, f"{name}.{sub_name}", seen)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}", seen)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, std: float, bias: bool = True):
        self.weight = parameter(rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float):
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self._eps)
