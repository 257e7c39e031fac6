"""
Neural-network operations on `Tensor`: attention math, normalization,
activations and the two reconstruction losses.
"""

import math

import numpy as np
from scipy.special import erf

from src.errors import ContractError, DimensionError, VocabularyIndexError
from src.nn.tensor import Function, Tensor

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m x k and a k x n tensor."""
    return a @ b


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out if bias is None else out + bias


class Softmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along `axis`."""
    return Softmax.apply(x, axis=axis)


class LayerNorm(Function):
    def forward(self, x, gain, bias, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        return self.xhat * gain + bias

    def backward(self, grad):
        _, gain, _ = self.inputs
        n = self.xhat.shape[-1]
        dxhat = grad * gain.data
        dx = (self.inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(grad.ndim - 1))
        return dx, (grad * self.xhat).sum(axis=lead), grad.sum(axis=lead)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {x.shape[-1]}")
    return LayerNorm.apply(x, gain, bias, eps=eps)


class Gelu(Function):
    def forward(self, x):
        return 0.5 * x * (1.0 + erf(x / _SQRT2))

    def backward(self, grad):
        x = self.inputs[0].data
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (grad * (cdf + x * pdf),)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    return Gelu.apply(x)


class Embedding(Function):
    def forward(self, table, ids=None):
        self.ids = ids
        return table[ids]

    def backward(self, grad):
        out = np.zeros_like(self.inputs[0].data)
        np.add.at(out, self.ids, grad)
        return (out,)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyIndexError(f"token id out of range [0, {table.shape[0]}): {ids.min()}..{ids.max()}")
    return Embedding.apply(table, ids=ids)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def _effective_mask(position_mask, length: int) -> np.ndarray:
    if position_mask is None:
        mask = np.ones(length, dtype=bool)
    else:
        mask = np.asarray(position_mask, dtype=bool)
        if mask.shape != (length,):
            raise DimensionError(f"position mask of shape {mask.shape} does not match {length} positions")
    if not mask.any():
        raise ContractError("loss over zero positions: the position mask selects nothing")
    return mask


class CrossEntropy(Function):
    def forward(self, logits, targets=None, mask=None):
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        log_probs = shifted - log_z
        rows = np.flatnonzero(mask)
        self.rows, self.targets = rows, targets[rows]
        self.probs = np.exp(log_probs)
        return -log_probs[rows, self.targets].sum() / len(rows)

    def backward(self, grad):
        g = np.zeros_like(self.probs)
        g[self.rows] = self.probs[self.rows]
        g[self.rows, self.targets] -= 1.0
        return (g * (grad / len(self.rows)),)


def cross_entropy(logits: Tensor, targets: np.ndarray, position_mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over the positions where `position_mask` is true."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects T x V logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise VocabularyIndexError(f"target id out of range [0, {logits.shape[1]})")
    mask = _effective_mask(position_mask, logits.shape[0])
    return CrossEntropy.apply(logits, targets=targets, mask=mask)


class L1Loss(Function):
    def forward(self, pred, target, mask=None):
        self.diff = pred - target
        self.weight = mask[:, None].astype(pred.dtype) / (int(mask.sum()) * pred.shape[1])
        return (np.abs(self.diff) * self.weight).sum()

    def backward(self, grad):
        g = np.sign(self.diff) * self.weight * grad
        return g, -g


def l1_loss(pred: Tensor, target: Tensor | np.ndarray, position_mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error over unmasked rows, averaged over features."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape or pred.ndim != 2:
        raise DimensionError(f"l1_loss: prediction {pred.shape} and target {target.shape} must be equal T x F")
    mask = _effective_mask(position_mask, pred.shape[0])
    return L1Loss.apply(pred, target, mask=mask)
