"""Reverse-mode automatic differentiation on numpy arrays."""
from . import ops
from .lstm import LSTM, LSTMLayer
from .ops import (
    conv1d,
    conv_transpose1d,
    cross_entropy_from_logits,
    dropout,
    mse_loss,
    scaled_dot_product_attention,
    upsample_linear,
    upsample_nearest,
)
from .modules import (
    BatchNorm1d,
    Conv1d,
    ConvTranspose1d,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    parameter,
    xavier_uniform,
)
from .optim import SGD, Adam, AdamW, clip_grad_norm
from .tensor import (
    Tensor,
    as_tensor,
    concat,
    exp,
    gelu,
    log_softmax,
    matmul,
    mean,
    no_grad,
    relu,
    set_nan_checks,
    sigmoid,
    softmax,
    stack,
    sum_,
    tanh,
)

__all__ = [
    "Adam",
    "AdamW",
    "BatchNorm1d",
    "Conv1d",
    "ConvTranspose1d",
    "Embedding",
    "LayerNorm",
    "Linear",
    "LSTM",
    "LSTMLayer",
    "Module",
    "ModuleList",
    "MultiHeadAttention",
    "SGD",
    "Tensor",
    "as_tensor",
    "clip_grad_norm",
    "concat",
    "conv1d",
    "conv_transpose1d",
    "cross_entropy_from_logits",
    "dropout",
    "exp",
    "gelu",
    "log_softmax",
    "matmul",
    "mean",
    "mse_loss",
    "no_grad",
    "ops",
    "parameter",
    "relu",
    "scaled_dot_product_attention",
    "upsample_linear",
    "upsample_nearest",
    "set_nan_checks",
    "sigmoid",
    "softmax",
    "stack",
    "sum_",
    "tanh",
    "xavier_uniform",
]
