"""Seeded finite-difference cases for every differentiable primitive.

Each generator returns ``(fn, inputs)``: ``fn`` maps a list of Tensors to a
Tensor, and the check compares the tape gradient of ``sum(fn(...) * R)``
against central differences for every input.
"""

import numpy as np

from bdarts.engine import functional as F
from bdarts.engine.tensor import Tensor, backward
from bdarts.search_space import SearchCell, build_operation, mixed_edge_partial_forward

from oracles import central_diff, rel_err


def _img(rng, b=2, c=3, h=5, w=5):
    return rng.standard_normal((b, c, h, w))


def _conv_weight(rng, cout, cin_g, k):
    return rng.standard_normal((cout, cin_g, k, k)) * 0.5


def g_add(rng):
    return lambda t: t[0] + t[1], [rng.standard_normal((3, 4)), rng.standard_normal((1, 4))]


def g_mul(rng):
    return lambda t: t[0] * t[1], [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]


def g_reduce(rng):
    return lambda t: t[0].mean(axis=1) + t[0].sum(axis=1), [rng.standard_normal((3, 5))]


def g_index(rng):
    return lambda t: t[0].reshape(4, 6)[1:3, ::2], [rng.standard_normal((2, 3, 4))]


def g_relu(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] += 0.01  # stay clear of the kink
    return lambda t: F.relu(t[0]), [x]


def g_conv(rng):
    return lambda t: F.conv2d(t[0], t[1], 1, 1), [_img(rng), _conv_weight(rng, 4, 3, 3)]


def g_conv_strided(rng):
    return lambda t: F.conv2d(t[0], t[1], 2, 2), [_img(rng, h=7, w=6), _conv_weight(rng, 2, 3, 5)]


def g_conv_depthwise(rng):
    return (lambda t: F.conv2d(t[0], t[1], 1, 2, 2, groups=3),
            [_img(rng, h=6, w=6), _conv_weight(rng, 3, 1, 3)])


def g_conv_depthwise_strided(rng):
    return (lambda t: F.conv2d(t[0], t[1], 2, 2, 1, groups=3),
            [_img(rng, h=7, w=7), _conv_weight(rng, 3, 1, 5)])


def g_conv_grouped(rng):
    return lambda t: F.conv2d(t[0], t[1], 1, 0, 1, groups=2), [_img(rng, c=4), _conv_weight(rng, 4, 2, 1)]


def g_maxpool(rng):
    return lambda t: F.pool2d(t[0], "max", 3, 1, 1), [_img(rng)]


def g_avgpool(rng):
    return lambda t: F.pool2d(t[0], "avg", 3, 2, 1), [_img(rng, h=6, w=7)]


def g_bn_affine(rng):
    return (lambda t: F.batchnorm2d(t[0], t[1], t[2]),
            [_img(rng), 1 + 0.1 * rng.standard_normal(3), 0.1 * rng.standard_normal(3)])


def g_bn(rng):
    return lambda t: F.batchnorm2d(t[0]), [_img(rng)]


def g_conv_bn(rng):
    return (lambda t: F.conv_bn(t[0], t[1], 1, 1, 1, 1, t[2], t[3]),
            [_img(rng), _conv_weight(rng, 2, 3, 3), 1 + 0.1 * rng.standard_normal(2), rng.standard_normal(2)])


def g_pool_bn(rng):
    return lambda t: F.pool_bn(t[0], "avg", 3, 1, 1), [_img(rng)]


def g_linear(rng):
    return (lambda t: F.linear(t[0], t[1], t[2]),
            [rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal(2)])


def g_gap(rng):
    return lambda t: F.global_avg_pool(t[0]), [_img(rng)]


def g_concat(rng):
    return lambda t: F.concat_channels([t[0], t[1]]), [_img(rng, c=2), _img(rng, c=1)]


def g_add_n(rng):
    return lambda t: F.add_n([t[0], t[1], t[0]]), [_img(rng), _img(rng)]


def g_scale(rng):
    return lambda t: F.scale(t[0], 0.37), [_img(rng)]


def g_weighted_sum(rng):
    return (lambda t: F.weighted_sum(t[0], [t[1], None, t[2]]),
            [rng.standard_normal(3), _img(rng), _img(rng)])


def g_softmax(rng):
    return lambda t: F.softmax(t[0], axis=-1), [rng.standard_normal((3, 5))]


def g_log_softmax(rng):
    return lambda t: F.log_softmax(t[0], axis=-1), [rng.standard_normal((3, 5))]


def g_cross_entropy(rng):
    labels = rng.integers(0, 4, size=5)
    return lambda t: F.cross_entropy(t[0], labels), [rng.standard_normal((5, 4))]


def g_channel_merge(rng):
    idx = np.array([0, 2])
    return (lambda t: F.channel_merge(t[0], F.channel_select(t[1], idx) * 2.0, idx),
            [_img(rng, c=4), _img(rng, c=4)])


def g_subsample(rng):
    return lambda t: F.subsample(t[0], 2), [_img(rng, h=6, w=6)]


def g_partial_edge(rng):
    ops = [build_operation(k, 2, 2, rng=rng) for k in ("dil_conv_3x3", "max_pool_3x3", "zero")]
    mask = np.array([True, False, True, False])
    return (lambda t: mixed_edge_partial_forward(t[0], ops, t[1], mask, stride=2),
            [_img(rng, c=4, h=6, w=6), rng.standard_normal(3)])


PRIMITIVES = [g_add, g_mul, g_reduce, g_index, g_relu, g_conv, g_conv_strided, g_conv_depthwise,
              g_conv_depthwise_strided, g_conv_grouped, g_maxpool, g_avgpool, g_bn_affine, g_bn,
              g_conv_bn, g_pool_bn, g_linear, g_gap, g_concat, g_add_n, g_scale, g_weighted_sum,
              g_softmax, g_log_softmax, g_cross_entropy, g_channel_merge, g_subsample, g_partial_edge]


def check_primitive(gen, seed, h=1e-6):
    """Worst relative error over the inputs of one seeded case."""
    rng = np.random.default_rng(seed)
    fn, arrays = gen(rng)
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    out = fn(tensors)
    proj = np.random.default_rng(seed + 10_000).standard_normal(out.shape)

    def loss_value():
        return float(np.sum(fn([Tensor(t.data) for t in tensors]).data * proj))

    loss = (out * Tensor(proj)).sum()
    backward(loss)
    worst = 0.0
    for t in tensors:
        num = central_diff(loss_value, t.data, h)
        worst = max(worst, rel_err(t.grad, num))
    return worst


def check_mixed_cell(seed, n_weight_coords=40, h=1e-6):
    """Full mixed-cell loss: every α entry, the input, and a sample of weights."""
    rng = np.random.default_rng(seed)
    catalog = ("sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5",
               "max_pool_3x3", "avg_pool_3x3", "skip_connect", "zero")
    cell = SearchCell("deep", 3, 3, 2, catalog, rng=rng)
    head = rng.standard_normal((3, 8)) * 0.5
    labels = rng.integers(0, 3, size=2)
    s0 = Tensor(_img(rng, c=3, h=6, w=6), requires_grad=True)
    s1 = Tensor(_img(rng, c=3, h=6, w=6), requires_grad=True)
    alpha = Tensor(1e-1 * rng.standard_normal((14, len(catalog))), requires_grad=True)
    head_t = Tensor(head, requires_grad=True)

    def forward():
        y = cell(s0, s1, alpha)
        return F.cross_entropy(F.linear(F.global_avg_pool(y), head_t), labels)

    params = cell.parameters()
    backward(forward())
    worst = 0.0
    for t in (alpha, s0, head_t):
        num = central_diff(lambda: float(forward().data), t.data, h)
        worst = max(worst, rel_err(t.grad, num))
    # weights: random coordinates drawn across all tensors
    sizes = np.array([p.size for p in params])
    picks = rng.choice(sizes.sum(), size=n_weight_coords, replace=False)
    bounds = np.cumsum(sizes)
    auto, num = [], []
    for flat in picks:
        i = int(np.searchsorted(bounds, flat, side="right"))
        off = int(flat - (bounds[i - 1] if i else 0))
        p = params[i]
        auto.append(p.grad.reshape(-1)[off])
        view = p.data.reshape(-1)
        old = view[off]
        view[off] = old + h
        fp = float(forward().data)
        view[off] = old - h
        fm = float(forward().data)
        view[off] = old
        num.append((fp - fm) / (2 * h))
    return max(worst, rel_err(np.array(auto), np.array(num)))


def all_cases(n=100, cell_every=25):
    """``n`` seeded cases; every ``cell_every``-th one is the full mixed-cell loss."""
    cases = []
    k = 0
    for i in range(n):
        if (i + 1) % cell_every == 0:
            cases.append(("mixed_cell", i))
        else:
            cases.append((PRIMITIVES[k % len(PRIMITIVES)].__name__[2:], i))
            k += 1
    return cases


def run_case(name, seed):
    if name == "mixed_cell":
        return check_mixed_cell(seed)
    return check_primitive(globals()["g_" + name], seed)
