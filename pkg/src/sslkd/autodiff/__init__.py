"""Float64 reverse-mode automatic differentiation on numpy arrays."""
from . import ops
from .gradcheck import grad_check, grad_check_params, numeric_grad
from .ops import (
    conv1d,
    cosine_similarity,
    gelu,
    group_norm,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    sigmoid,
    softmax,
)
from .tensor import Node, Tape, Tensor, backward

__all__ = [
    "Node", "Tape", "Tensor", "backward", "ops",
    "grad_check", "grad_check_params", "numeric_grad",
    "conv1d", "cosine_similarity", "gelu", "group_norm", "layer_norm", "linear",
    "log_softmax", "matmul", "sigmoid", "softmax",
]
