import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bdarts.engine import (AdamState, SgdState, Tensor, adam_step, backward, clip_grad_norm, cosine_lr,
                           dump_blob, load_blob, no_grad, set_backend, sgd_step)
from bdarts.engine import _fallback
from bdarts.engine import functional as F
from bdarts.engine import kernels
from bdarts.errors import DimensionError, NumericalError, UsageError
from gradcases import PRIMITIVES, check_primitive

BACKENDS = ["numpy"] + (["cython"] if kernels._ckernels is not None else [])

CONV_CASES = [
    # (cin, cout, k, stride, pad, dilation, groups)
    (3, 4, 3, 1, 1, 1, 1),
    (3, 2, 5, 2, 2, 1, 1),
    (4, 4, 3, 1, 2, 2, 4),
    (4, 4, 5, 1, 4, 2, 4),
    (3, 3, 5, 2, 2, 1, 3),
    (4, 6, 1, 1, 0, 1, 1),
    (4, 4, 1, 2, 0, 1, 2),
]


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = set_backend(request.param)
    yield request.param
    set_backend(prev)


@pytest.mark.parametrize("case", CONV_CASES)
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_conv_forward_matches_direct_loops_bitwise(backend, case, dtype):
    cin, cout, k, s, p, d, g = case
    rng = np.random.default_rng(sum(case))
    x = rng.standard_normal((2, cin, 9, 8)).astype(dtype)
    w = rng.standard_normal((cout, cin // g, k, k)).astype(dtype)
    got = kernels.conv2d_forward(x, w, s, p, d, g)
    ref = oracles.conv2d(x, w, s, p, d, g)
    if dtype == np.float32 and k == 1 and s == 1 and g == 1:
        # pointwise float32 goes through BLAS
        np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-5)
    else:
        assert np.array_equal(got, ref)


@pytest.mark.parametrize("case", CONV_CASES)
def test_conv_backward_backends_agree(case):
    cin, cout, k, s, p, d, g = case
    rng = np.random.default_rng(7 + sum(case))
    x = rng.standard_normal((2, cin, 9, 8))
    w = rng.standard_normal((cout, cin // g, k, k))
    y = _fallback.conv2d_forward(x, w, s, p, d, g)
    go = rng.standard_normal(y.shape)
    gi = kernels.conv2d_backward_input(go, w, 9, 8, s, p, d, g)
    gw = kernels.conv2d_backward_weight(go, x, k, k, s, p, d, g)
    np.testing.assert_allclose(gi, _fallback.conv2d_backward_input(go, w, 9, 8, s, p, d, g), atol=1e-12)
    np.testing.assert_allclose(gw, _fallback.conv2d_backward_weight(go, x, k, k, s, p, d, g), atol=1e-12)


@pytest.mark.parametrize("kind", ["max", "avg"])
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_pool_forward_matches_direct_loops(backend, kind, stride, pad, dtype):
    x = np.random.default_rng(3).standard_normal((2, 3, 7, 6)).astype(dtype)
    ref = oracles.pool2d(x, kind, 3, stride, pad)
    got = kernels.maxpool2d_forward(x, 3, stride, pad)[0] if kind == "max" else \
        kernels.avgpool2d_forward(x, 3, stride, pad)
    assert np.array_equal(got, ref)


def test_maxpool_ties_route_gradient_to_first_tap(backend):
    x = np.zeros((1, 1, 3, 3))
    t = Tensor(x, requires_grad=True)
    y = F.pool2d(t, "max", 3, 1, 0)
    backward(y.sum())
    assert t.grad[0, 0, 0, 0] == 1.0 and t.grad.sum() == 1.0


def test_batchnorm_matches_formula(backend):
    x = np.random.default_rng(4).standard_normal((4, 3, 5, 5))
    np.testing.assert_allclose(F.batchnorm2d(Tensor(x)).data, oracles.batchnorm(x), atol=1e-12)


@pytest.mark.parametrize("gen", PRIMITIVES, ids=lambda g: g.__name__[2:])
def test_primitive_gradients(gen):
    assert check_primitive(gen, 1234) < 1e-4


def test_shared_node_gradients_accumulate():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x * x + x
    backward(y.sum())
    np.testing.assert_array_equal(x.grad, [3.0, 5.0])


def test_leaf_gradients_accumulate_across_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    backward((x * 2.0).sum())
    backward((x * 2.0).sum())
    np.testing.assert_array_equal(x.grad, [4.0, 4.0, 4.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad
    with pytest.raises(UsageError):
        backward(y.sum())


def test_backward_needs_scalar():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(UsageError):
        backward(x * 2.0)


def test_shape_errors():
    x = Tensor(np.ones((1, 3, 4, 4)))
    with pytest.raises(DimensionError):
        F.conv2d(x, Tensor(np.ones((2, 2, 3, 3))))
    with pytest.raises(DimensionError):
        F.add_n([x, Tensor(np.ones((1, 3, 2, 2)))])
    with pytest.raises(DimensionError):
        F.concat_channels([])


def test_unknown_backend():
    with pytest.raises(UsageError):
        set_backend("fortran")


@settings(max_examples=30, deadline=None)
@given(h=st.integers(3, 9), w=st.integers(3, 9), k=st.sampled_from([1, 3, 5]),
       s=st.sampled_from([1, 2]), d=st.sampled_from([1, 2]))
def test_conv_output_shape_property(h, w, k, s, d):
    p = d * (k - 1) // 2
    x = Tensor(np.zeros((1, 2, h, w)))
    y = F.conv2d(x, Tensor(np.zeros((2, 1, k, k))), s, p, d, groups=2)
    assert y.shape == (1, 2, (h - 1) // s + 1, (w - 1) // s + 1)


# -- optimizers and schedules ------------------------------------------------------


def test_adam_zero_lr_freezes_values_but_advances_state():
    p = Tensor(np.array([0.5, -1.0]), requires_grad=True)
    st_ = AdamState.create([p], (0.5, 0.999), weight_decay=1e-3)
    before = p.data.copy()
    adam_step([p], [np.array([0.1, 0.2])], 0.0, st_)
    assert np.array_equal(p.data, before)
    assert st_.t == 1 and np.any(st_.m[0] != 0)


def test_adam_first_step_is_lr_sized():
    p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    st_ = AdamState.create([p], (0.5, 0.999))
    adam_step([p], [np.array([3.0, -0.5])], 0.01, st_)
    np.testing.assert_allclose(p.data, [0.99, 1.01], atol=1e-8)


def test_sgd_momentum_and_decay():
    p = Tensor(np.array([1.0]), requires_grad=True)
    st_ = SgdState.create([p], 0.9, 0.1)
    sgd_step([p], [np.array([1.0])], 0.5, st_)
    assert p.data[0] == pytest.approx(1.0 - 0.5 * 1.1)
    sgd_step([p], [np.array([0.0])], 0.5, st_)
    assert p.data[0] == pytest.approx(0.45 - 0.5 * (0.9 * 1.1 + 0.1 * 0.45))


def test_non_finite_gradient_is_numerical_error():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(NumericalError):
        sgd_step([p], [np.array([np.nan, 0.0])], 0.1, SgdState.create([p]))


def test_cosine_schedule():
    assert cosine_lr(1, 50, 0.1) == 0.1
    assert cosine_lr(26, 50, 0.1) == pytest.approx(0.05)
    assert cosine_lr(50, 50, 0.1) == pytest.approx(0.5 * 0.1 * (1 + np.cos(np.pi * 49 / 50)))
    with pytest.raises(UsageError):
        cosine_lr(0, 50, 0.1)


def test_clip_grad_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == 5.0
    assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-5)


def test_blob_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal((2, 3, 4))
    dump_blob(a, tmp_path / "a.f64")
    assert np.array_equal(load_blob(tmp_path / "a.f64"), a)
    with open(tmp_path / "a.f64", "rb") as fh:
        raw = fh.read()
    assert len(raw) == 16 + a.size * 8
