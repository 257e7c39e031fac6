"""
Dense tensor with reverse-mode automatic differentiation.

Every differentiable operation is a `Function` subclass: `forward` works on
plain NumPy arrays, `backward` maps the gradient of the output to one
gradient per input. `Function.apply` builds the graph node; `Tensor.backward`
walks the graph once in reverse topological order.
"""

import contextlib
import logging
from typing import Any, Iterator

import numpy as np

from src.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward ops without recording a graph (IDP refresh, evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` (inverse of NumPy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        dtype = np.result_type(*(t.data.dtype for t in inputs))
        out = np.asarray(fn.forward(*(t.data for t in inputs), **kwargs), dtype=dtype)
        track = _grad_enabled and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=track, _ctx=fn if track else None)


class Tensor:
    """
    Row-major dense array plus optional gradient.

    Float data keeps its dtype (float32 for training, float64 for gradient
    checks); anything else is stored as float32.
    """

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None,
                 _ctx: Function | None = None, name: str | None = None):
        if dtype is None and not (isinstance(data, np.ndarray) and data.dtype.kind == "f"):
            dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._ctx = _ctx
        self.name = name

    # -- basic properties ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            _raise_not_scalar(self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------------

    def _lift(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        return Add.apply(self, Neg.apply(self._lift(other)))

    def __rsub__(self, other: Any) -> "Tensor":
        return Add.apply(self._lift(other), Neg.apply(self))

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise ContractError("tensor / tensor is not supported; divide by a scalar")
        return Mul.apply(self, self._lift(1.0 / other))

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return MatMul.apply(self, self._lift(other))

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    @property
    def T(self) -> "Tensor":
        return Transpose.apply(self)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.data.size)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=shape)

    # -- reverse mode ----------------------------------------------------------------

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into `.grad` of every requires_grad leaf."""
        if self.data.size != 1:
            _raise_not_scalar(self.shape)
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topological_order()):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._ctx is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._ctx.inputs, node._ctx.backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=parent.data.dtype)
                if parent_grad.shape != parent.shape:
                    raise DimensionError(
                        f"{type(node._ctx).__name__}.backward produced {parent_grad.shape} for input {parent.shape}"
                    )
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def _raise_not_scalar(shape: tuple[int, ...]):
    raise ContractError(f"expected a scalar tensor, got shape {shape}")


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)


class Abs(Function):
    def forward(self, a):
        return np.abs(a)

    def backward(self, grad):
        return (grad * np.sign(self.inputs[0].data),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        return a @ b

    def backward(self, grad):
        a, b = self.inputs
        return grad @ b.data.T, a.data.T @ grad


class Transpose(Function):
    def forward(self, a):
        if a.ndim != 2:
            raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
        return a.T

    def backward(self, grad):
        return (grad.T,)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis, self.keepdims = axis, keepdims
        return a.sum(axis=axis, keepdims=keepdims)

    def backward(self, grad):
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape=()):
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class GetItem(Function):
    def forward(self, a, index=None):
        self.index = index
        return a[index]

    def backward(self, grad):
        out = np.zeros_like(self.inputs[0].data)
        np.add.at(out, self.index, grad)
        return (out,)
