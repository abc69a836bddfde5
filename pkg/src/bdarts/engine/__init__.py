"""Reverse-mode autodiff over dense NumPy tensors, plus optimizers."""

from . import functional
from .kernels import backend, set_backend
from .module import BatchNorm2d, Conv2d, ConvBN, Linear, Module, parameter
from .optim import AdamState, SgdState, adam_step, clip_grad_norm, cosine_lr, sgd_step
from .tensor import Tensor, backward, dump_blob, grad_enabled, load_blob, no_grad, tape_order

__all__ = [
    "AdamState",
    "BatchNorm2d",
    "Conv2d",
    "ConvBN",
    "Linear",
    "Module",
    "SgdState",
    "Tensor",
    "adam_step",
    "backend",
    "backward",
    "clip_grad_norm",
    "cosine_lr",
    "dump_blob",
    "functional",
    "grad_enabled",
    "load_blob",
    "no_grad",
    "parameter",
    "set_backend",
    "sgd_step",
    "tape_order",
]
