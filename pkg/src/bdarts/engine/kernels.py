"""Kernel backend selection.

The compiled module is used when it imported cleanly and the array dtype is
float32/float64; otherwise the NumPy fallback runs. ``BDARTS_PURE_PYTHON=1``
forces the fallback for the whole process.
"""

import os

import numpy as np

from ..errors import UsageError
from . import _fallback

try:
    if os.environ.get("BDARTS_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _ckernels
except ImportError:
    _ckernels = None

BACKEND = "cython" if _ckernels is not None else "numpy"

def _impl(arr):
    if _ckernels is not None and arr.dtype in (np.float32, np.float64):
        return _ckernels
    return _fallback


def backend():
    return BACKEND


def set_backend(name):
    """Switch backends at runtime ("cython" or "numpy"); returns the previous name."""
    global BACKEND
    if name not in ("cython", "numpy"):
        raise UsageError(f"unknown backend {name!r}")
    if name == "cython" and _ckernels is None:
        raise UsageError("compiled kernels are not available in this build")
    prev, BACKEND = BACKEND, name
    return prev


def _c(a):
    return np.ascontiguousarray(a)


def _depthwise(x, w, groups):
    return groups > 1 and groups == x.shape[1] == w.shape[0] and w.shape[1] == 1


def conv2d_forward(x, w, stride, padding, dilation, groups):
    cout, cin_g, kh, kw = w.shape
    mod = _impl(x) if BACKEND == "cython" else _fallback
    if mod is _ckernels and _depthwise(x, w, groups):
        return mod.depthwise_forward(_c(x), _c(w), stride, padding, dilation)
    if x.dtype == np.float32 and kh == 1 and kw == 1 and stride == 1 and padding == 0 and groups == 1:
        # single precision is the speed option: hand pointwise layers to BLAS
        b, _, h, wd = x.shape
        y = np.matmul(w.reshape(cout, cin_g), _c(x).reshape(b, cin_g, -1))
        return y.reshape(b, cout, h, wd)
    return mod.conv2d_forward(_c(x), _c(w), stride, padding, dilation, groups)


def conv2d_backward_input(gout, w, h, wd, stride, padding, dilation, groups):
    cout, cin_g, kh, kw = w.shape
    if kh == 1 and kw == 1 and stride == 1 and padding == 0 and groups == 1:
        b = gout.shape[0]
        gx = np.matmul(w.reshape(cout, cin_g).T, gout.reshape(b, cout, -1))
        return gx.reshape(b, cin_g, h, wd)
    mod = _impl(gout) if BACKEND == "cython" else _fallback
    if mod is _ckernels and groups > 1 and groups == gout.shape[1] and cin_g == 1:
        return mod.depthwise_backward_input(_c(gout), _c(w), h, wd, stride, padding, dilation)
    return mod.conv2d_backward_input(_c(gout), _c(w), h, wd, stride, padding, dilation, groups)


def conv2d_backward_weight(gout, x, kh, kw, stride, padding, dilation, groups):
    if kh == 1 and kw == 1 and padding == 0 and groups == 1:
        if stride > 1:
            x = x[:, :, ::stride, ::stride]
        b, cout = gout.shape[:2]
        cin = x.shape[1]
        xs = _c(x).reshape(b, cin, -1)
        gw = np.matmul(_c(gout).reshape(b, cout, -1), xs.transpose(0, 2, 1)).sum(axis=0)
        return gw.reshape(cout, cin, 1, 1)
    mod = _impl(gout) if BACKEND == "cython" else _fallback
    if mod is _ckernels and groups > 1 and groups == gout.shape[1] == x.shape[1]:
        return mod.depthwise_backward_weight(_c(gout), _c(x), kh, kw, stride, padding, dilation)
    return mod.conv2d_backward_weight(_c(gout), _c(x), kh, kw, stride, padding, dilation, groups)


def maxpool2d_forward(x, k, stride, padding):
    mod = _impl(x) if BACKEND == "cython" else _fallback
    if mod is _ckernels:
        return mod.maxpool2d_forward_padded(_c(x), k, stride, padding)
    return mod.maxpool2d_forward(_c(x), k, stride, padding)


def maxpool2d_backward(gout, taps, h, wd, k, stride, padding):
    mod = _impl(gout) if BACKEND == "cython" else _fallback
    return mod.maxpool2d_backward(_c(gout), _c(taps), h, wd, k, stride, padding)


def avgpool2d_forward(x, k, stride, padding):
    mod = _impl(x) if BACKEND == "cython" else _fallback
    if mod is _ckernels:
        return mod.avgpool2d_forward_padded(_c(x), k, stride, padding)
    return mod.avgpool2d_forward(_c(x), k, stride, padding)


def avgpool2d_backward(gout, h, wd, k, stride, padding):
    mod = _impl(gout) if BACKEND == "cython" else _fallback
    return mod.avgpool2d_backward(_c(gout), h, wd, k, stride, padding)


def bn_forward(x, eps):
    """Batch-statistics normalization; returns (xhat, inv_std[C])."""
    mod = _impl(x) if BACKEND == "cython" else _fallback
    return mod.bn_forward(_c(x), eps)


def bn_backward(g, xhat, inv_std):
    mod = _impl(g) if BACKEND == "cython" else _fallback
    return mod.bn_backward(_c(g), _c(xhat), inv_std)


def axpy(out, x, w):
    """In-place ``out += w * x`` for same-shape contiguous arrays."""
    if out.size == 0:
        return out
    if BACKEND == "cython" and _impl(out) is _ckernels and x.dtype == out.dtype:
        _ckernels.axpy(out.reshape(-1), _c(x).reshape(-1), float(w))
    else:
        out += w * x
    return out
