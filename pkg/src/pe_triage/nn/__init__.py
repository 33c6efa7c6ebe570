"""Minimal numpy tensor library with reverse-mode differentiation."""

from .ops import (
    BatchNormState,
    activation,
    batch_norm,
    channel_reduce,
    conv2d,
    global_pool,
    linear,
    max_pool2d,
    relu,
    sigmoid,
    softmax,
    softmax_cross_entropy,
)
from .optim import Adam, AdamConfig, optimizer_step
from .tensor import GraphNotBuilt, ShapeMismatch, Tensor, concat, no_grad, zero_grad
from .weights import CorruptWeights, IncompatibleWeights, load_weights, save_weights

__all__ = [
    "Adam",
    "AdamConfig",
    "BatchNormState",
    "CorruptWeights",
    "GraphNotBuilt",
    "IncompatibleWeights",
    "ShapeMismatch",
    "Tensor",
    "activation",
    "batch_norm",
    "channel_reduce",
    "concat",
    "conv2d",
    "global_pool",
    "linear",
    "load_weights",
    "max_pool2d",
    "no_grad",
    "optimizer_step",
    "relu",
    "save_weights",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "zero_grad",
]
