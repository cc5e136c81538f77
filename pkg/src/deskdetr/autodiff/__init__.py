"""Dense tensors with reverse-mode automatic differentiation."""

from . import functional
from .functional import count_flops
from .gradcheck import check_gradients, numeric_grad, relative_error
from .nn import (
    BatchNorm2d,
    Conv2d,
    Embedding,
    LayerNorm,
    Linear,
    MLP,
    Module,
    MultiheadAttention,
    Parameter,
)
from .tensor import Tape, Tensor, backward, default_dtype, grad_enabled, hold_detached, no_grad, precision

__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "Embedding",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "MultiheadAttention",
    "Parameter",
    "Tape",
    "Tensor",
    "backward",
    "check_gradients",
    "count_flops",
    "default_dtype",
    "functional",
    "grad_enabled",
    "hold_detached",
    "no_grad",
    "numeric_grad",
    "precision",
    "relative_error",
]
