from src.nn.tensor import Function, Tensor, is_grad_enabled, no_grad

__all__ = ["Function", "Tensor", "is_grad_enabled", "no_grad"]
