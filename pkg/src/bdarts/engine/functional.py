"""Differentiable primitives for image classifiers.

Closures capture only what their backward pass needs (conv: input and
weight; relu and affine-free batchnorm: their own output), which keeps the
resident activation set of a full supernet small.
"""

import numpy as np

from ..errors import ConfigError, DimensionError
from . import kernels
from .profile import record
from .tensor import Tensor, make_result


def _out_size(n, k, stride, padding, dilation=1):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def relu(x):
    out = np.maximum(x.data, 0)
    record("relu", out.shape)
    return make_result(out, (x,), lambda g: (g * (out > 0),))


def _check_conv(x, weight, stride, padding, dilation, groups):
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, wd = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"groups={groups} must divide Cin={cin} and Cout={cout}", "groups")
    if cin_g * groups != cin:
        raise DimensionError(f"weight expects {cin_g * groups} input channels, input has {cin}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} padding={padding} dilation={dilation}")
    ho = _out_size(h, kh, stride, padding, dilation)
    wo = _out_size(wd, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be {ho}x{wo} for input {h}x{wd}")


def _conv_fwd(xd, wdat, stride, padding, dilation, groups):
    out = kernels.conv2d_forward(xd, wdat.astype(xd.dtype, copy=False), stride, padding, dilation, groups)
    kh, kw = wdat.shape[2:]
    record("conv2d", out.shape, mult_adds=out.size * kh * kw * wdat.shape[1], params=wdat.size)
    return out


def _conv_bwd(g, xd, wdat, need_x, need_w, stride, padding, dilation, groups):
    gx = gw = None
    h, wd = xd.shape[2:]
    kh, kw = wdat.shape[2:]
    if need_x:
        gx = kernels.conv2d_backward_input(g, wdat.astype(g.dtype, copy=False), h, wd,
                                           stride, padding, dilation, groups)
    if need_w:
        gw = kernels.conv2d_backward_weight(g, xd, kh, kw, stride, padding, dilation, groups)
    return gx, gw


def conv2d(x, weight, stride=1, padding=0, dilation=1, groups=1):
    """Cross-correlation of ``x`` [B,Cin,H,W] with ``weight`` [Cout,Cin/groups,kh,kw]."""
    _check_conv(x, weight, stride, padding, dilation, groups)
    xd, wdat = x.data, weight.data
    need_x, need_w = x.requires_grad, weight.requires_grad
    out = _conv_fwd(xd, wdat, stride, padding, dilation, groups)
    return make_result(out, (x, weight),
                       lambda g: _conv_bwd(g, xd, wdat, need_x, need_w, stride, padding, dilation, groups))


def _check_pool(x, kind, kernel, stride, padding):
    if kind not in ("max", "avg"):
        raise ConfigError(f"unknown pooling kind {kind!r}", "kind")
    if kernel < 1 or kernel > 11 or stride < 1 or padding < 0 or padding >= kernel:
        raise ConfigError(f"invalid pooling kernel={kernel} stride={stride} padding={padding}")
    if x.ndim != 4:
        raise DimensionError(f"pool2d expects 4-d input, got {x.shape}")
    h, wd = x.shape[2:]
    if _out_size(h, kernel, stride, padding) < 1 or _out_size(wd, kernel, stride, padding) < 1:
        raise DimensionError(f"pool2d output empty for input {h}x{wd}")


def _pool_fwd(xd, kind, kernel, stride, padding):
    h, wd = xd.shape[2:]
    if kind == "max":
        out, taps = kernels.maxpool2d_forward(xd, kernel, stride, padding)
        record("max_pool", out.shape)
        return out, lambda g: kernels.maxpool2d_backward(g, taps, h, wd, kernel, stride, padding)
    out = kernels.avgpool2d_forward(xd, kernel, stride, padding)
    record("avg_pool", out.shape)
    return out, lambda g: kernels.avgpool2d_backward(g, h, wd, kernel, stride, padding)


def pool2d(x, kind, kernel=3, stride=1, padding=1):
    """Max or average pooling; average excludes implicit padding from the divisor.

    Max pooling sends each window's gradient to its first maximal element in
    row-major order.
    """
    _check_pool(x, kind, kernel, stride, padding)
    out, pool_bw = _pool_fwd(x.data, kind, kernel, stride, padding)
    return make_result(out, (x,), lambda g: (pool_bw(g),))


def _check_bn(shape, eps):
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}", "eps")
    if len(shape) != 4:
        raise DimensionError(f"batchnorm2d expects 4-d input, got {shape}")
    b, _, h, wd = shape
    if b * h * wd < 2:
        raise DimensionError(f"batchnorm2d needs at least 2 values per channel, got {b * h * wd}")


def _bn_fwd(xd, eps):
    return kernels.bn_forward(xd, eps)


def _bn_bwd(gxhat, xhat, inv_std):
    return kernels.bn_backward(gxhat, xhat, inv_std)


def _bn_affine(xhat, gain, bias):
    c = xhat.shape[1]
    if gain is None:
        record("batchnorm", xhat.shape)
        return xhat
    record("batchnorm", xhat.shape, params=2 * c)
    return xhat * gain.data.reshape(1, c, 1, 1) + bias.data.reshape(1, c, 1, 1)


def _bn_affine_bwd(g, xhat, gain):
    if gain is None:
        return g, ()
    c = xhat.shape[1]
    gxhat = g * gain.data.reshape(1, c, 1, 1)
    return gxhat, ((g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))


def batchnorm2d(x, gain=None, bias=None, eps=1e-5):
    """Per-channel normalization with batch statistics; affine when gain/bias are given.

    Training-mode only: no running statistics are kept.
    """
    _check_bn(x.shape, eps)
    xhat, inv_std = _bn_fwd(x.data, eps)
    out = _bn_affine(xhat, gain, bias)
    parents = (x,) if gain is None else (x, gain, bias)

    def bw(g):
        gxhat, gaff = _bn_affine_bwd(g, xhat, gain)
        return (_bn_bwd(gxhat, xhat, inv_std),) + gaff

    return make_result(out, parents, bw)


def conv_bn(x, weight, stride=1, padding=0, dilation=1, groups=1, gain=None, bias=None, eps=1e-5):
    """``batchnorm2d(conv2d(x, weight))`` as one node; the raw conv output is not retained."""
    _check_conv(x, weight, stride, padding, dilation, groups)
    xd, wdat = x.data, weight.data
    need_x, need_w = x.requires_grad, weight.requires_grad
    y = _conv_fwd(xd, wdat, stride, padding, dilation, groups)
    _check_bn(y.shape, eps)
    xhat, inv_std = _bn_fwd(y, eps)
    del y
    out = _bn_affine(xhat, gain, bias)
    parents = (x, weight) if gain is None else (x, weight, gain, bias)

    def bw(g):
        gxhat, gaff = _bn_affine_bwd(g, xhat, gain)
        gy = _bn_bwd(gxhat, xhat, inv_std)
        return _conv_bwd(gy, xd, wdat, need_x, need_w, stride, padding, dilation, groups) + gaff

    return make_result(out, parents, bw)


def pool_bn(x, kind, kernel=3, stride=1, padding=1, gain=None, bias=None, eps=1e-5):
    """``batchnorm2d(pool2d(x))`` as one node."""
    _check_pool(x, kind, kernel, stride, padding)
    y, pool_bw = _pool_fwd(x.data, kind, kernel, stride, padding)
    _check_bn(y.shape, eps)
    xhat, inv_std = _bn_fwd(y, eps)
    del y
    out = _bn_affine(xhat, gain, bias)
    parents = (x,) if gain is None else (x, gain, bias)

    def bw(g):
        gxhat, gaff = _bn_affine_bwd(g, xhat, gain)
        return (pool_bw(_bn_bwd(gxhat, xhat, inv_std)),) + gaff

    return make_result(out, parents, bw)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for x [B, in], weight [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wdat = x.data, weight.data
    out = xd @ wdat.T
    if bias is not None:
        out = out + bias.data
    record("linear", out.shape, mult_adds=out.size * wdat.shape[1],
           params=weight.size + (bias.size if bias is not None else 0))
    parents = (x, weight) if bias is None else (x, weight, bias)
    need_x = x.requires_grad

    def bw(g):
        grads = [g @ wdat if need_x else None, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return make_result(out, parents, bw)


def global_avg_pool(x):
    """Spatial mean per channel: [B,C,H,W] -> [B,C]."""
    shape = x.shape
    n = shape[2] * shape[3]
    out = x.data.mean(axis=(2, 3))
    record("global_avg_pool", out.shape)
    return make_result(out, (x,), lambda g: (np.broadcast_to((g / n)[:, :, None, None], shape),))


def concat_channels(tensors):
    if not tensors:
        raise DimensionError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: {t.shape} incompatible with {ref}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    record("concat", out.shape)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    return make_result(out, tuple(tensors),
                       lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def add_n(tensors):
    if not tensors:
        raise DimensionError("add_n needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise DimensionError(f"add_n: {t.shape} differs from {ref}")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    record("add", out.shape)
    return make_result(out, tuple(tensors), lambda g: (g,) * len(tensors))


def scale(x, s):
    return make_result(x.data * s, (x,), lambda g: (g * s,))


def zeros_like(x, shape=None):
    """All-zero tensor with no gradient path."""
    return Tensor(np.zeros(x.shape if shape is None else shape, dtype=x.dtype))


def weighted_sum(weights, tensors):
    """``sum_i weights[i] * tensors[i]``; a ``None`` entry is an all-zero term.

    ``weights`` is a 1-d tensor; one fused node replaces the scale/add chain.
    """
    if weights.ndim != 1 or weights.shape[0] != len(tensors):
        raise DimensionError(f"weighted_sum: {weights.shape[0]} weights for {len(tensors)} tensors")
    live = [(i, t) for i, t in enumerate(tensors) if t is not None]
    if not live:
        raise DimensionError("weighted_sum needs at least one non-zero term")
    ref = live[0][1].shape
    for _, t in live:
        if t.shape != ref:
            raise DimensionError(f"weighted_sum: operand shapes differ ({t.shape} vs {ref})")
    wv = weights.data
    out = np.zeros(ref, dtype=live[0][1].dtype)
    for i, t in live:
        kernels.axpy(out, t.data, wv[i])
    record("weighted_sum", out.shape)
    parents = (weights,) + tuple(t for _, t in live)

    def bw(g):
        gw = np.zeros_like(wv)
        for i, t in live:
            gw[i] = np.vdot(g, t.data)
        # α may be wider than the activations; keep gradients in the activation dtype
        return (gw,) + tuple(g.dtype.type(wv[i]) * g for i, _ in live)

    return make_result(out, parents, bw)


def softmax(x, axis=-1):
    if x.size == 0:
        raise ConfigError("softmax of empty logits")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make_result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    if x.size == 0:
        raise ConfigError("log_softmax of empty logits")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return make_result(out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ConfigError(f"cross_entropy needs [B, K>=2] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return make_result(np.asarray(loss), (logits,), bw)


def channel_select(x, idx):
    """Gather channels ``idx`` (sorted, unique) from [B,C,H,W]."""
    idx = np.asarray(idx)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, idx] = g
        return (full,)

    out = np.ascontiguousarray(x.data[:, idx])
    return make_result(out, (x,), bw)


def channel_merge(base, values, idx):
    """Copy of ``base`` whose channels ``idx`` are replaced by ``values``."""
    idx = np.asarray(idx)
    if values.shape[1] != len(idx) or values.shape[2:] != base.shape[2:] or values.shape[0] != base.shape[0]:
        raise DimensionError(f"channel_merge: values {values.shape} vs base {base.shape} with {len(idx)} slots")
    out = base.data.copy()
    out[:, idx] = values.data
    record("channel_merge", out.shape)

    def bw(g):
        gb = g.copy()
        gb[:, idx] = 0
        return gb, np.ascontiguousarray(g[:, idx])

    return make_result(out, (base, values), bw)


def subsample(x, stride):
    """Keep every ``stride``-th row and column."""
    if stride == 1:
        return x
    return x[:, :, ::stride, ::stride]
