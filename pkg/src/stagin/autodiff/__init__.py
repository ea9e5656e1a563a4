"""Minimal dense reverse-mode automatic differentiation on numpy arrays."""

from .tensor import Tensor, as_tensor, grad, topological_order
from .gradcheck import grad_check, numerical_grad
from . import ops

__all__ = ["Tensor", "as_tensor", "grad", "topological_order", "grad_check", "numerical_grad", "ops"]
