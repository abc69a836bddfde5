"""Optimizers and learning-rate schedules."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError, UsageError


def _grads(params, grads):
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise UsageError(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if g is None:
            raise UsageError(f"parameter {p.name or '?'} has no gradient")
        if g.shape != p.shape:
            raise UsageError(f"gradient shape {g.shape} != parameter shape {p.shape} ({p.name})")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {p.name or '?'}")
    return grads


@dataclass
class SgdState:
    momentum: float = 0.9
    weight_decay: float = 3e-4
    buffers: list = field(default_factory=list)

    @classmethod
    def create(cls, params, momentum=0.9, weight_decay=3e-4):
        return cls(momentum, weight_decay, [np.zeros_like(p.data) for p in params])


def sgd_step(params, grads, lr, state):
    """Heavy-ball SGD with L2 weight decay; updates ``params`` in place."""
    grads = _grads(params, grads)
    for p, g, buf in zip(params, grads, state.buffers):
        d = g + state.weight_decay * p.data if state.weight_decay else g
        buf *= state.momentum
        buf += d
        p.data -= lr * buf
    return params


@dataclass
class AdamState:
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def create(cls, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        return cls(tuple(betas), eps, weight_decay, 0,
                   [np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, lr, state):
    """Bias-corrected Adam with weight decay folded into the gradient.

    The step counter and moments advance even when ``lr`` is zero; the
    parameters are then left bitwise unchanged.
    """
    grads = _grads(params, grads)
    b1, b2 = state.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        d = g + state.weight_decay * p.data if state.weight_decay else g
        m *= b1
        m += (1.0 - b1) * d
        v *= b2
        v += (1.0 - b2) * d * d
        if lr != 0.0:
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def cosine_lr(t, T, lr_max):
    """Cosine annealing without restart for 1-based epoch ``t`` of ``T``."""
    if not 1 <= t <= T:
        raise UsageError(f"epoch {t} outside [1, {T}]")
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * (t - 1) / T))


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        factor = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total
