import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bdarts.analysis import (Genotype, GenotypeError, alpha_trajectory, collapse_report,
                             count_convolutions, derive_cell, derive_genotype,
                             detect_first_update_epoch, dominant_op_per_edge, genotype_from_json,
                             genotype_to_json, trajectory_csv, weight_free_fraction)
from bdarts.errors import CatalogError, UsageError
from bdarts.search_space import AlphaTable, edge_list, make_catalog

CAT7 = make_catalog(False)
CAT8 = make_catalog(True)
FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def _softmax(a):
    z = np.exp(a - a.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def test_uniform_alpha_tie_break():
    g = derive_genotype(AlphaTable(["convolution", "enhancement"], CAT7))
    for entries in g.cells.values():
        assert entries == tuple((CAT7[0], s) for _ in range(4) for s in (0, 1))


@pytest.mark.parametrize("seed", range(20))
def test_derive_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((14, 8)) * 2
    if seed % 3 == 0:
        logits = np.round(logits)  # force ties
    w = _softmax(logits)
    assert derive_cell(w, CAT8) == oracles.derive_brute_force(w, CAT8, edge_list())


def test_dominant_pattern_recovered():
    rng = np.random.default_rng(0)
    pattern = rng.integers(0, 6, size=14)  # never zero (index 6 in the 7-op catalog)
    logits = np.zeros((14, 7))
    logits[np.arange(14), pattern] = 3.0 + np.arange(14) * 0.01
    g = derive_genotype({"normal": logits}, CAT7)
    w = _softmax(logits)
    assert g.cells["normal"] == oracles.derive_brute_force(w, CAT7, edge_list())
    for op, src in g.cells["normal"]:
        e = [i for i, (t, s) in enumerate(edge_list()) if s == src and CAT7[pattern[i]] == op]
        assert e


def test_zero_never_retained():
    logits = np.zeros((14, 8))
    logits[:, CAT8.index("zero")] = 10.0
    g = derive_genotype({"normal": logits, "reduction": logits}, CAT8)
    assert all(op != "zero" for entries in g.cells.values() for op, _ in entries)


def test_derive_is_pure():
    table = AlphaTable(["normal"], CAT7)
    table["normal"].data[:] = np.random.default_rng(1).standard_normal((14, 7))
    before = table.snapshot()["normal"]
    assert derive_genotype(table) == derive_genotype(table)
    assert np.array_equal(table["normal"].data, before)


def test_derive_catalog_mismatch():
    with pytest.raises(CatalogError):
        derive_genotype(AlphaTable(["normal"], CAT8), CAT7)
    with pytest.raises(CatalogError):
        derive_genotype({"normal": np.zeros((14, 8))}, CAT7)
    with pytest.raises(UsageError):
        derive_genotype({"normal": np.zeros((14, 7))})


def _genotype(op_a, op_b, catalog=CAT7):
    entries = tuple((op_a if k == 0 else op_b, s) for _ in range(4) for k, s in enumerate((0, 1)))
    return Genotype({"convolution": entries, "enhancement": entries}, catalog)


def test_gamma_values():
    assert count_convolutions(_genotype("max_pool_3x3", "avg_pool_3x3")) == 0
    assert count_convolutions(_genotype("sep_conv_3x3", "sep_conv_3x3")) == 16
    assert count_convolutions(_genotype("sep_conv_3x3", "avg_pool_3x3")) == 8
    assert weight_free_fraction(_genotype("sep_conv_3x3", "avg_pool_3x3")) == 0.5


def test_gamma_invariant_under_entry_order():
    g = derive_genotype({"convolution": np.random.default_rng(3).standard_normal((14, 7)),
                         "enhancement": np.random.default_rng(4).standard_normal((14, 7))}, CAT7)
    flipped = Genotype({k: tuple(reversed(v)) for k, v in g.cells.items()}, CAT7)
    assert count_convolutions(flipped) == count_convolutions(g)


def test_genotype_json_round_trip():
    g = derive_genotype({"convolution": np.random.default_rng(5).standard_normal((14, 7)),
                         "enhancement": np.zeros((14, 7))}, CAT7)
    data = genotype_to_json(g)
    assert genotype_from_json(data) == g
    assert genotype_to_json(genotype_from_json(data)) == data


def test_tampered_op_rejected_with_path():
    doc = json.loads(genotype_to_json(_genotype("sep_conv_3x3", "max_pool_3x3")))
    doc["cells"]["enhancement"][3]["op"] = "sep_conv_7x7"
    with pytest.raises(GenotypeError) as err:
        genotype_from_json(json.dumps(doc))
    assert err.value.field == "$.cells.enhancement[3].op"


def test_wrong_entry_count_rejected():
    doc = json.loads(genotype_to_json(_genotype("sep_conv_3x3", "max_pool_3x3")))
    doc["cells"]["convolution"].pop()
    with pytest.raises(GenotypeError):
        genotype_from_json(json.dumps(doc))


def test_bad_source_rejected():
    doc = json.loads(genotype_to_json(_genotype("sep_conv_3x3", "max_pool_3x3")))
    doc["cells"]["convolution"][0]["source"] = 2
    with pytest.raises(GenotypeError):
        genotype_from_json(json.dumps(doc))


def test_prior_catalog_version_fixture():
    with open(os.path.join(FIXTURES, "genotype_ops8.json"), "rb") as fh:
        data = fh.read()
    g = genotype_from_json(data, expected_catalog=CAT8)
    assert g.catalog == CAT8
    with pytest.raises(GenotypeError) as err:
        genotype_from_json(data, expected_catalog=CAT7)
    assert "7 ops" in str(err.value)


def test_detect_first_update():
    frozen = [np.full(5, 0.2)] * 15
    moved = [np.array([0.3, 0.2, 0.2, 0.2, 0.1])] * 5
    assert detect_first_update_epoch(frozen + moved) == 16
    assert detect_first_update_epoch(frozen) == 16  # never moves: T + 1
    assert detect_first_update_epoch([np.zeros(2), np.ones(2)]) == 2
    with pytest.raises(UsageError):
        detect_first_update_epoch([])
    with pytest.raises(UsageError):
        detect_first_update_epoch(frozen, eps=0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), e1=st.floats(1e-6, 1e-1), e2=st.floats(1e-6, 1e-1))
def test_detect_nonincreasing_in_eps(seed, e1, e2):
    rng = np.random.default_rng(seed)
    traj = list(np.cumsum(rng.exponential(1e-3, size=(20, 4)), axis=0))
    lo, hi = sorted((e1, e2))
    assert detect_first_update_epoch(traj, lo) <= detect_first_update_epoch(traj, hi)


def _records(mats_per_epoch, catalog):
    return [{"epoch": t + 1, "catalog": list(catalog),
             "alpha_softmax": {k: _softmax(v).tolist() for k, v in mats.items()}}
            for t, mats in enumerate(mats_per_epoch)]


def test_collapse_report_constant_when_frozen():
    mats = {"convolution": np.zeros((14, 7)), "enhancement": np.zeros((14, 7))}
    rep = collapse_report(_records([mats] * 4, CAT7))
    assert rep.gamma == [16] * 4 and rep.epochs == [1, 2, 3, 4]
    csv = rep.to_csv().splitlines()
    assert len(csv) == 5 and csv[0].startswith("epoch,gamma,weight_free_fraction,convolution:e0")


def test_dominant_map_all_zero():
    logits = np.zeros((14, 8))
    logits[:, CAT8.index("zero")] = 2.0
    dom = dominant_op_per_edge({"normal": _softmax(logits)}, CAT8)
    assert set(dom.values()) == {"zero"} and len(dom) == 14


def test_collapse_report_does_not_mutate():
    recs = _records([{"convolution": np.random.default_rng(1).standard_normal((14, 7)),
                      "enhancement": np.zeros((14, 7))}], CAT7)
    frozen = json.dumps(recs, sort_keys=True)
    collapse_report(recs)
    assert json.dumps(recs, sort_keys=True) == frozen


def test_trajectory_export():
    recs = _records([{"normal": np.zeros((14, 8))}] * 3, CAT8)
    assert len(alpha_trajectory(recs, "normal", 0)) == 3
    rows = trajectory_csv(recs, "normal", 0, CAT8).splitlines()
    assert len(rows) == 4 and rows[0].split(",")[1] == CAT8[0]


def test_stored_clr_gamma_curve_dips_before_the_end():
    with open(os.path.join(FIXTURES, "clr_desk_metrics.jsonl")) as fh:
        recs = [json.loads(line) for line in fh]
    rep = collapse_report(recs)
    assert len(rep.gamma) == 20
    assert int(np.argmin(rep.gamma)) < len(rep.gamma) - 1
    assert rep.gamma == [r["gamma"] for r in recs]
