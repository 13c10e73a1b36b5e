"""Minimal float64 reverse-mode autodiff engine and optimizer."""

from .functional import (
    EPS_NORM,
    binary_cross_entropy_with_logits,
    concat,
    cosine_similarity,
    dropout,
    gather_rows,
    gelu,
    l2_normalize,
    layer_norm,
    log_softmax,
    mean_pool,
    scatter_rows,
    sigmoid,
    soft_cross_entropy,
    softmax,
    softmax_cross_entropy,
    stop_gradient,
)
from .gradcheck import check_gradients, numeric_grad, relative_error
from .optim import AdamW, AdamWState, adamw_step, cosine_warmup, linear_warmup_decay
from .tensor import Tensor, as_tensor, backward, is_grad_enabled, matmul, no_grad

__all__ = [
    "AdamW",
    "AdamWState",
    "EPS_NORM",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "backward",
    "binary_cross_entropy_with_logits",
    "check_gradients",
    "concat",
    "cosine_similarity",
    "cosine_warmup",
    "dropout",
    "gather_rows",
    "gelu",
    "is_grad_enabled",
    "l2_normalize",
    "layer_norm",
    "linear_warmup_decay",
    "log_softmax",
    "matmul",
    "mean_pool",
    "no_grad",
    "numeric_grad",
    "relative_error",
    "scatter_rows",
    "sigmoid",
    "soft_cross_entropy",
    "softmax",
    "softmax_cross_entropy",
    "stop_gradient",
]
