"""Nested finite-difference oracle for the unrolled architecture gradient.

The oracle differentiates α -> L_val(w - ξ ∇w L_train(w, α), α) by central
differences over α, computing the inner ∇w L_train on the tape. Subtracting
the direct partial ∇α L_val at w' isolates the Hessian-vector correction.
"""

import numpy as np

from bdarts.engine import Tensor
from bdarts.engine import functional as F
from bdarts.search import alpha_grad_second_order, loss_and_grads

from conftest import TinySupernet
from oracles import central_diff, rel_err

SMOOTH_CATALOG = ("avg_pool_3x3", "skip_connect", "zero")


def smooth_case(seed, batch=16, hw=8):
    """Supernet without active kinks: positive stem weights and inputs keep every ReLU linear."""
    net = TinySupernet(catalog=SMOOTH_CATALOG, seed=seed)
    net.stem.weight.data = np.abs(net.stem.weight.data)
    net._alpha["normal"].data = 0.3 * np.random.default_rng(seed + 100).standard_normal((14, 3))
    rng = np.random.default_rng(seed + 200)
    train = (np.abs(rng.standard_normal((batch, 3, hw, hw))), rng.integers(0, 2, batch))
    valid = (np.abs(rng.standard_normal((batch, 3, hw, hw))), rng.integers(0, 2, batch))
    return net, train, valid


def _val_loss(net, batch):
    x, y = batch
    return float(F.cross_entropy(net(Tensor(x)), y).data)


def unrolled_grad_oracle(net, train, valid, xi, h=1e-5):
    """(total gradient, direct partial at w') by nested differentiation."""
    w, a = net.parameters(), net.arch_parameters()
    alpha = a[0]
    w0 = [p.data for p in w]

    def f():
        _, _, gw = loss_and_grads(net, train, w, a)
        try:
            for p, d, g in zip(w, w0, gw):
                p.data = d - xi * g
            return _val_loss(net, valid)
        finally:
            for p, d in zip(w, w0):
                p.data = d

    total = central_diff(f, alpha.data, h)
    _, _, gw = loss_and_grads(net, train, w, a)
    for p, d, g in zip(w, w0, gw):
        p.data = d - xi * g
    _, _, (direct,) = loss_and_grads(net, valid, a, w)
    for p, d in zip(w, w0):
        p.data = d
    return total, direct


def correction_error(seed, xi=0.5, fd_scale=0.01, batch=16, hw=8):
    """Relative error of the implemented correction term against the oracle."""
    net, train, valid = smooth_case(seed, batch, hw)
    total, direct = unrolled_grad_oracle(net, train, valid, xi)
    (got,), _, _ = alpha_grad_second_order(net, train, valid, xi, fd_scale=fd_scale)
    return rel_err(got - direct, total - direct)
