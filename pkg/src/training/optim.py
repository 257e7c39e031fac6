"""
Adam with bias correction, a linear warm-up / linear decay learning rate,
and global-norm gradient clipping.
"""

import logging
import math
from typing import Callable

import numpy as np

from src.errors import ContractError, NumericalError
from src.nn.tensor import Tensor

logger = logging.getLogger(__name__)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """0 -> base_lr linearly over `warmup_steps`, then linearly down to 0 at `total_steps`."""
    if warmup_steps > total_steps:
        raise ContractError(f"warmup_steps={warmup_steps} exceeds total_steps={total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)


def warmup_steps_for(total_steps: int, fraction: float) -> int:
    return min(total_steps, int(math.ceil(fraction * total_steps)))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most `max_norm`; returns the norm before."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


class Adam:
    """Adam over named parameters. Parameters without a gradient are left untouched,
    and their moment buffers and step counts do not advance."""

    def __init__(self, named_params: list[tuple[str, Tensor]], betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.named_params = list(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.t = {name: 0 for name, _ in self.named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()

    def step(self, lr: float, include: Callable[[str], bool] | None = None) -> None:
        for name, p in self.named_params:
            if p.grad is None or (include is not None and not include(name)):
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in parameter {name} at step {self.step_count + 1}")
            adam_step(p, p.grad, self.m[name], self.v[name], self.t[name] + 1, lr, self.beta1, self.beta2, self.eps)
            self.t[name] += 1
        self.step_count += 1

    # -- persistence ----------------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.named_params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def state_counters(self) -> dict:
        return {"step_count": self.step_count, "t": dict(self.t)}

    def load_state(self, tensors: dict[str, np.ndarray], counters: dict) -> None:
        for name, p in self.named_params:
            for kind, buf in (("m", self.m), ("v", self.v)):
                key = f"{kind}.{name}"
                if key not in tensors or tensors[key].shape != p.shape:
                    raise ContractError(f"optimizer state for {name} is missing or misshapen")
                buf[name] = tensors[key].astype(p.data.dtype).copy()
        self.step_count = int(counters["step_count"])
        self.t = {name: int(counters["t"][name]) for name, _ in self.named_params}


def adam_step(param: Tensor, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of `param` in place; `m` and `v` are updated in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.data.dtype)
