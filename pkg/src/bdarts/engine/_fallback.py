"""Pure-NumPy convolution and pooling kernels.

Forward passes accumulate one kernel tap at a time, in (input channel, row,
column) order, so every output element sees the same summation sequence as a
direct nested-loop implementation. Backward passes are free to use BLAS.
"""

import numpy as np


def _out_size(n, k, stride, padding, dilation=1):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _tap(xp, i, j, ho, wo, stride, dilation):
    # strided view of the padded input hit by kernel tap (i, j)
    r0 = i * dilation
    c0 = j * dilation
    return xp[..., r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]


def conv2d_forward(x, w, stride, padding, dilation, groups):
    b, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    ho = _out_size(h, kh, stride, padding, dilation)
    wo = _out_size(wd, kw, stride, padding, dilation)
    cout_g = cout // groups
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    xp = xp.reshape(b, groups, cin_g, xp.shape[2], xp.shape[3])
    wg = w.reshape(groups, cout_g, cin_g, kh, kw)
    out = np.zeros((b, groups, cout_g, ho, wo), dtype=x.dtype)
    for ci in range(cin_g):
        xc = xp[:, :, ci]
        for i in range(kh):
            for j in range(kw):
                patch = _tap(xc, i, j, ho, wo, stride, dilation)
                out += wg[None, :, :, ci, i, j, None, None] * patch[:, :, None]
    return out.reshape(b, cout, ho, wo)


def conv2d_backward_input(gout, w, h, wd, stride, padding, dilation, groups):
    b, cout, ho, wo = gout.shape
    _, cin_g, kh, kw = w.shape
    cout_g = cout // groups
    gxp = np.zeros((b, groups, cin_g, h + 2 * padding, wd + 2 * padding), dtype=gout.dtype)
    gg = gout.reshape(b, groups, cout_g, ho, wo)
    wg = w.reshape(groups, cout_g, cin_g, kh, kw)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("bgohw,goc->bgchw", gg, wg[:, :, :, i, j], optimize=True)
            _tap(gxp, i, j, ho, wo, stride, dilation)[...] += contrib
    gxp = gxp.reshape(b, groups * cin_g, h + 2 * padding, wd + 2 * padding)
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gxp)


def conv2d_backward_weight(gout, x, kh, kw, stride, padding, dilation, groups):
    b, cout, ho, wo = gout.shape
    _, cin, h, wd = x.shape
    cin_g = cin // groups
    cout_g = cout // groups
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    xp = xp.reshape(b, groups, cin_g, xp.shape[2], xp.shape[3])
    gg = gout.reshape(b, groups, cout_g, ho, wo)
    gw = np.empty((groups, cout_g, cin_g, kh, kw), dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = _tap(xp, i, j, ho, wo, stride, dilation)
            gw[:, :, :, i, j] = np.einsum("bgohw,bgchw->goc", gg, patch, optimize=True)
    return gw.reshape(cout, cin_g, kh, kw)


def maxpool2d_forward(x, k, stride, padding):
    b, c, h, wd = x.shape
    ho = _out_size(h, k, stride, padding)
    wo = _out_size(wd, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x
    best = np.full((b, c, ho, wo), -np.inf, dtype=x.dtype)
    taps = np.full((b, c, ho, wo), -1, dtype=np.int8)
    for i in range(k):
        for j in range(k):
            cand = _tap(xp, i, j, ho, wo, stride, 1)
            better = cand > best
            best[better] = cand[better]
            taps[better] = i * k + j
    return best, taps


def maxpool2d_backward(gout, taps, h, wd, k, stride, padding):
    b, c, ho, wo = gout.shape
    gxp = np.zeros((b, c, h + 2 * padding, wd + 2 * padding), dtype=gout.dtype)
    for i in range(k):
        for j in range(k):
            _tap(gxp, i, j, ho, wo, stride, 1)[...] += np.where(taps == i * k + j, gout, 0.0)
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gxp)


def _avg_counts(h, wd, k, stride, padding, ho, wo, dtype):
    ones = np.pad(np.ones((h, wd), dtype=dtype), padding) if padding else np.ones((h, wd), dtype=dtype)
    cnt = np.zeros((ho, wo), dtype=dtype)
    for i in range(k):
        for j in range(k):
            cnt += _tap(ones, i, j, ho, wo, stride, 1)
    return cnt


def avgpool2d_forward(x, k, stride, padding):
    b, c, h, wd = x.shape
    ho = _out_size(h, k, stride, padding)
    wo = _out_size(wd, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    acc = np.zeros((b, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            acc += _tap(xp, i, j, ho, wo, stride, 1)
    return acc / _avg_counts(h, wd, k, stride, padding, ho, wo, x.dtype)


def avgpool2d_backward(gout, h, wd, k, stride, padding):
    b, c, ho, wo = gout.shape
    g = gout / _avg_counts(h, wd, k, stride, padding, ho, wo, gout.dtype)
    gxp = np.zeros((b, c, h + 2 * padding, wd + 2 * padding), dtype=gout.dtype)
    for i in range(k):
        for j in range(k):
            _tap(gxp, i, j, ho, wo, stride, 1)[...] += g
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gxp)


def bn_forward(x, eps):
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    xhat = x - mean
    var = np.square(xhat).mean(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= inv_std
    return xhat, inv_std.reshape(-1)


def bn_backward(g, xhat, inv_std):
    s1 = g.mean(axis=(0, 2, 3), keepdims=True)
    s2 = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
    return inv_std.reshape(1, -1, 1, 1) * (g - s1 - xhat * s2)
