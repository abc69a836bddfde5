import numpy as np
import pytest

from bdarts.engine import Tensor, backward
from bdarts.engine import functional as F
from bdarts.errors import CatalogError, ConfigError, DimensionError
from bdarts.search_space import (FULL_CATALOG, AlphaTable, MixedEdge, SearchCell, build_operation,
                                 catalog_version, edge_list, make_catalog, mixed_edge_forward,
                                 mixed_edge_partial_forward, n_edges, sample_channel_mask,
                                 validate_catalog)


def _x(c=4, hw=6, seed=0, b=2):
    return Tensor(np.random.default_rng(seed).standard_normal((b, c, hw, hw)))


@pytest.mark.parametrize("m", range(1, 7))
def test_edge_count_closed_form(m):
    assert n_edges(m) == len(edge_list(m)) == m * (m + 3) // 2


def test_standard_cell_has_14_edges():
    assert n_edges() == 14
    assert edge_list()[:3] == [(2, 0), (2, 1), (3, 0)]


def test_catalog_with_and_without_skip():
    assert len(make_catalog(False)) == 7 and "skip_connect" not in make_catalog(False)
    assert make_catalog(True) == FULL_CATALOG
    assert catalog_version(make_catalog(False)) != catalog_version(make_catalog(True))
    assert catalog_version(make_catalog(True)).startswith("ops8-")


def test_catalog_validation():
    with pytest.raises(CatalogError):
        validate_catalog(("sep_conv_3x3", "conv_7x7"))
    with pytest.raises(CatalogError):
        validate_catalog(("zero", "zero"))


@pytest.mark.parametrize("kind", FULL_CATALOG)
@pytest.mark.parametrize("stride", [1, 2])
def test_operation_shapes(kind, stride):
    op = build_operation(kind, 4, stride, rng=np.random.default_rng(0))
    y = op(_x(hw=8))
    assert y.shape == (2, 4, 4 if stride == 2 else 8, 4 if stride == 2 else 8)


def test_factorized_reduce_needs_even_size():
    with pytest.raises(DimensionError):
        build_operation("skip_connect", 4, 2)(_x(hw=7))


def test_operation_errors():
    with pytest.raises(ConfigError):
        build_operation("conv_9x9", 4, 1)
    with pytest.raises(ConfigError):
        build_operation("sep_conv_3x3", 4, 3)
    with pytest.raises(ConfigError):
        build_operation("sep_conv_3x3", 0, 1)


def test_zero_op_is_zero_and_passes_no_gradient():
    x = Tensor(np.ones((1, 2, 4, 4)), requires_grad=True)
    y = build_operation("zero", 2, 2)(x)
    assert y.shape == (1, 2, 2, 2) and not y.data.any()


def test_mixed_edge_is_softmax_weighted_sum_of_ops():
    rng = np.random.default_rng(1)
    catalog = make_catalog(True)
    edge = MixedEdge(4, 1, catalog, rng=rng)
    x = _x(seed=2)
    alpha = rng.standard_normal(len(catalog))
    got = edge(x, Tensor(alpha)).data
    w = np.exp(alpha - alpha.max())
    w /= w.sum()
    ref = sum(wi * op(x).data for wi, op in zip(w, edge.ops))
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_uniform_alpha_averages_ops():
    catalog = ("avg_pool_3x3", "skip_connect")
    edge = MixedEdge(3, 1, catalog)
    x = _x(c=3)
    got = edge(x, Tensor(np.zeros(2))).data
    np.testing.assert_allclose(got, 0.5 * (edge.ops[0](x).data + x.data), atol=1e-12)


def test_alpha_row_length_checked():
    edge = MixedEdge(2, 1, ("avg_pool_3x3", "zero"))
    with pytest.raises(DimensionError):
        edge(_x(c=2), Tensor(np.zeros(3)))


def test_mask_selects_floor_c_over_k():
    rng = np.random.default_rng(0)
    for c, k in [(8, 4), (7, 2), (5, 1)]:
        assert sample_channel_mask(c, k, rng).sum() == c // k
    with pytest.raises(ConfigError):
        sample_channel_mask(3, 4, rng)


def test_partial_channel_all_selected_equals_standard():
    catalog = make_catalog(True)
    edge = MixedEdge(4, 1, catalog, rng=np.random.default_rng(3))
    x = _x(seed=4)
    alpha = Tensor(np.random.default_rng(5).standard_normal(len(catalog)))
    full = mixed_edge_forward(x, edge.ops, alpha).data
    part = mixed_edge_partial_forward(x, edge.ops, alpha, np.ones(4, bool)).data
    assert np.max(np.abs(full - part)) <= 1e-12


@pytest.mark.parametrize("stride", [1, 2])
def test_partial_channel_copies_unselected_channels_bitwise(stride):
    ops = [build_operation(k, 2, stride, rng=np.random.default_rng(0))
           for k in ("sep_conv_3x3", "max_pool_3x3", "zero")]
    x = _x(seed=6, hw=8)
    mask = np.array([False, True, False, True])
    y = mixed_edge_partial_forward(x, ops, Tensor(np.zeros(3)), mask, stride).data
    base = x.data if stride == 1 else F.pool2d(x, "max", 2, 2, 0).data
    assert np.array_equal(y[:, ~mask], base[:, ~mask])


def test_partial_channel_gradient_reaches_copied_channels():
    ops = [build_operation("avg_pool_3x3", 2, 1)]
    x = Tensor(np.random.default_rng(0).standard_normal((1, 4, 5, 5)), requires_grad=True)
    y = mixed_edge_partial_forward(x, ops, Tensor(np.zeros(1)), np.array([1, 0, 1, 0], bool))
    backward(y.sum())
    np.testing.assert_array_equal(x.grad[:, [1, 3]], 1.0)


@pytest.mark.parametrize("kind,hw_out", [("deep", 8), ("broad", 4), ("enhancement", 8)])
def test_search_cell_output(kind, hw_out):
    cell = SearchCell(kind, 6, 6, 3, make_catalog(False), rng=np.random.default_rng(0))
    x = _x(c=6, hw=8)
    y = cell(x, x, Tensor(np.zeros((14, 7))))
    assert y.shape == (2, 12, hw_out, hw_out) and cell.out_channels == 12


def test_search_cell_rejects_wrong_alpha_shape():
    cell = SearchCell("deep", 2, 2, 2, ("avg_pool_3x3", "zero"))
    with pytest.raises(DimensionError):
        cell(_x(c=2), _x(c=2), Tensor(np.zeros((14, 3))))


def test_search_cell_unknown_kind():
    with pytest.raises(ConfigError):
        SearchCell("wide", 2, 2, 2, ("zero",))


def test_alpha_table_round_trip():
    table = AlphaTable(["convolution", "enhancement"], make_catalog(False))
    table["convolution"].data[3, 2] = 1.5
    back = AlphaTable.from_dict(table.to_dict(), expected_catalog=make_catalog(False))
    for k in table.keys():
        assert np.array_equal(back[k].data, table[k].data)
    sm = table.softmax()["convolution"]
    np.testing.assert_allclose(sm.sum(axis=1), 1.0)


def test_alpha_table_catalog_mismatch():
    doc = AlphaTable(["normal"], make_catalog(True)).to_dict()
    with pytest.raises(CatalogError):
        AlphaTable.from_dict(doc, expected_catalog=make_catalog(False))
    doc["catalog_version"] = "ops8-000000000000"
    with pytest.raises(CatalogError):
        AlphaTable.from_dict(doc)
