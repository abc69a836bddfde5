"""Genotype derivation, the convolution count, and collapse diagnostics.

Everything here is a pure function of its inputs: no search state is read
or modified.
"""

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import CatalogError, UsageError
from .search_space import (
    CONV_OPS,
    FULL_CATALOG,
    N_INPUT_NODES,
    N_INTERMEDIATE,
    WEIGHT_FREE_OPS,
    catalog_version,
    edge_list,
    validate_catalog,
)

GENOTYPE_SCHEMA = "bdarts-genotype/1"


class GenotypeError(CatalogError):
    """Malformed genotype document; ``field`` carries the JSON path."""


@dataclass(frozen=True)
class Genotype:
    """Per α-bearing cell kind: 8 (op, source) pairs, two per intermediate node."""

    cells: dict
    catalog: tuple

    @property
    def catalog_version(self):
        return catalog_version(self.catalog)

    def __eq__(self, other):
        return (isinstance(other, Genotype) and tuple(self.catalog) == tuple(other.catalog)
                and _canon(self.cells) == _canon(other.cells))

    def __hash__(self):
        return hash((tuple(self.catalog), tuple(sorted(_canon(self.cells).items()))))

    def validate(self):
        validate_catalog(self.catalog)
        for key, entries in self.cells.items():
            _check_entries(entries, self.catalog, f"$.cells.{key}")
        return self


def _canon(cells):
    return {k: tuple((str(op), int(src)) for op, src in v) for k, v in cells.items()}


def _check_entries(entries, catalog, path):
    if len(entries) != 2 * N_INTERMEDIATE:
        raise GenotypeError(f"expected {2 * N_INTERMEDIATE} entries, got {len(entries)}", path)
    for n, (op, src) in enumerate(entries):
        node = N_INPUT_NODES + n // 2
        where = f"{path}[{n}]"
        if op not in FULL_CATALOG:
            raise GenotypeError(f"unknown operation {op!r}", where + ".op")
        if op not in catalog:
            raise GenotypeError(f"operation {op!r} is not in this catalog", where + ".op")
        if op == "zero":
            raise GenotypeError("zero cannot be a retained operation", where + ".op")
        if not isinstance(src, (int, np.integer)) or not 0 <= src < node:
            raise GenotypeError(f"source {src!r} must precede node {node}", where + ".source")


# -- derivation ------------------------------------------------------------------


def _softmax_rows(a):
    a = np.asarray(a, dtype=np.float64)
    z = np.exp(a - a.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def derive_cell(weights, catalog):
    """Discretize one softmax-weight matrix [edges x ops] into 8 (op, source) pairs.

    Per node keep the two incoming edges with the largest non-zero op weight;
    on each kept edge take the strongest non-zero op. Ties go to the lower op
    index, then the lower source index.
    """
    catalog = tuple(catalog)
    candidates = [i for i, op in enumerate(catalog) if op != "zero"]
    if not candidates:
        raise CatalogError("catalog has no non-zero operation to derive", "catalog")
    edges = edge_list()
    if weights.shape != (len(edges), len(catalog)):
        raise CatalogError(f"weights shape {weights.shape} does not match "
                           f"{len(edges)} edges x {len(catalog)} ops", "alpha")
    entries = []
    for node in range(N_INPUT_NODES, N_INPUT_NODES + N_INTERMEDIATE):
        scored = []
        for e, (target, src) in enumerate(edges):
            if target != node:
                continue
            row = weights[e, candidates]
            k = int(np.argmax(row))  # first maximum: lower op index wins
            scored.append((-row[k], src, catalog[candidates[k]]))
        scored.sort(key=lambda t: (t[0], t[1]))
        kept = sorted(scored[:2], key=lambda t: t[1])
        entries.extend((op, src) for _, src, op in kept)
    return tuple(entries)


def derive_genotype(alpha, catalog=None, softmaxed=False):
    """Genotype from an ``AlphaTable`` or a mapping of key -> [edges x ops] logits.

    ``softmaxed`` marks a mapping that already holds softmax weights.
    """
    if hasattr(alpha, "tables"):
        if catalog is not None and tuple(catalog) != tuple(alpha.catalog):
            raise CatalogError(f"alpha catalog {catalog_version(alpha.catalog)} differs from "
                               f"{catalog_version(catalog)}", "catalog")
        catalog = alpha.catalog
        mats = {k: t.data for k, t in alpha.tables.items()}
    else:
        if catalog is None:
            raise UsageError("catalog is required when alpha is a plain mapping")
        mats = alpha
    catalog = validate_catalog(catalog)
    cells = {}
    for key, mat in mats.items():
        mat = np.asarray(mat, dtype=np.float64)
        cells[key] = derive_cell(mat if softmaxed else _softmax_rows(mat), catalog)
    return Genotype(cells, catalog)


def count_convolutions(genotype):
    """Number of convolutional entries summed over every cell kind."""
    return sum(op in CONV_OPS for entries in genotype.cells.values() for op, _ in entries)


def weight_free_fraction(genotype):
    entries = [op for ops in genotype.cells.values() for op, _ in ops]
    return sum(op in WEIGHT_FREE_OPS for op in entries) / max(1, len(entries))


# -- first-update detection --------------------------------------------------------


def _flatten(snapshot):
    if isinstance(snapshot, dict):
        return np.concatenate([np.asarray(snapshot[k], dtype=np.float64).ravel() for k in sorted(snapshot)])
    return np.asarray(snapshot, dtype=np.float64).ravel()


def detect_first_update_epoch(trajectory, eps=1e-4):
    """First epoch whose softmax weights drift more than ``eps`` from epoch 1.

    ``trajectory[t-1]`` holds the softmax weights at the end of epoch t, as an
    array or a mapping of cell kind to array. Returns T + 1 when nothing moves.
    """
    if eps <= 0:
        raise UsageError(f"eps must be positive, got {eps}")
    if len(trajectory) == 0:
        raise UsageError("empty trajectory")
    base = _flatten(trajectory[0])
    for t, snap in enumerate(trajectory, start=1):
        if np.max(np.abs(_flatten(snap) - base)) > eps:
            return t
    return len(trajectory) + 1


# -- collapse diagnostics ----------------------------------------------------------


def dominant_op_per_edge(alpha_softmax, catalog):
    """Raw preference per edge, ``zero`` included: {(kind, edge index): op}."""
    catalog = tuple(catalog)
    out = {}
    for key in alpha_softmax:
        mat = np.asarray(alpha_softmax[key])
        for e in range(mat.shape[0]):
            out[(key, e)] = catalog[int(np.argmax(mat[e]))]
    return out


@dataclass
class CollapseReport:
    epochs: list
    gamma: list
    weight_free_fraction: list
    dominant: list  # per epoch: {(kind, edge): op}

    def to_csv(self):
        keys = sorted(self.dominant[0]) if self.dominant else []
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "gamma", "weight_free_fraction"] + [f"{k}:e{e}" for k, e in keys])
        for t, g, w, dom in zip(self.epochs, self.gamma, self.weight_free_fraction, self.dominant):
            writer.writerow([t, g, f"{w:.6f}"] + [dom[k] for k in keys])
        return buf.getvalue()


def collapse_report(records, catalog=None):
    """Per-epoch γ, weight-free fraction and dominant ops from metrics records."""
    if not records:
        raise UsageError("empty metrics log")
    epochs, gamma, wf, dom = [], [], [], []
    for rec in records:
        cat = tuple(rec.get("catalog", catalog) or ())
        if not cat:
            raise UsageError("metrics record carries no catalog and none was given")
        weights = {k: np.asarray(v) for k, v in rec["alpha_softmax"].items()}
        g = derive_genotype(weights, cat, softmaxed=True)
        epochs.append(int(rec["epoch"]))
        gamma.append(count_convolutions(g))
        wf.append(weight_free_fraction(g))
        dom.append(dominant_op_per_edge(weights, cat))
    return CollapseReport(epochs, gamma, wf, dom)


def alpha_trajectory(records, key=None, edge=None):
    """Epoch-ordered softmax snapshots, optionally narrowed to one kind and edge."""
    out = []
    for rec in records:
        snap = {k: np.asarray(v) for k, v in rec["alpha_softmax"].items()}
        if key is not None:
            snap = snap[key] if edge is None else snap[key][edge]
        out.append(snap)
    return out


def trajectory_csv(records, key, edge, catalog):
    """Rows of (epoch, weight per op) for plotting one edge's trajectory."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch"] + list(catalog))
    for rec in records:
        row = np.asarray(rec["alpha_softmax"][key])[edge]
        writer.writerow([rec["epoch"]] + [f"{v:.10f}" for v in row])
    return buf.getvalue()


# -- JSON ------------------------------------------------------------------------------


def genotype_to_json(genotype):
    doc = {
        "schema": GENOTYPE_SCHEMA,
        "catalog": list(genotype.catalog),
        "catalog_version": genotype.catalog_version,
        "cells": {
            key: [{"node": N_INPUT_NODES + n // 2, "op": op, "source": int(src)}
                  for n, (op, src) in enumerate(entries)]
            for key, entries in genotype.cells.items()
        },
    }
    return (json.dumps(doc, indent=2) + "\n").encode()


def genotype_from_json(data, expected_catalog=None):
    """Parse and validate a genotype document.

    ``expected_catalog`` rejects files written against a different catalog.
    """
    try:
        doc = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise GenotypeError(f"not valid JSON: {exc}", "$") from exc
    if not isinstance(doc, dict):
        raise GenotypeError("top level must be an object", "$")
    if doc.get("schema") != GENOTYPE_SCHEMA:
        raise GenotypeError(f"unsupported schema {doc.get('schema')!r}", "$.schema")
    cat = doc.get("catalog")
    if not isinstance(cat, list):
        raise GenotypeError("catalog must be a list of operation names", "$.catalog")
    for i, op in enumerate(cat):
        if op not in FULL_CATALOG:
            raise GenotypeError(f"unknown operation {op!r}", f"$.catalog[{i}]")
    catalog = validate_catalog(cat)
    if doc.get("catalog_version") != catalog_version(catalog):
        raise GenotypeError("catalog_version does not match the listed catalog", "$.catalog_version")
    if expected_catalog is not None and tuple(expected_catalog) != catalog:
        raise GenotypeError(f"genotype built for catalog {catalog_version(catalog)} "
                            f"({len(catalog)} ops), this run uses {catalog_version(expected_catalog)} "
                            f"({len(expected_catalog)} ops)", "$.catalog_version")
    cells_doc = doc.get("cells")
    if not isinstance(cells_doc, dict) or not cells_doc:
        raise GenotypeError("cells must be a non-empty object", "$.cells")
    cells = {}
    for key, items in cells_doc.items():
        path = f"$.cells.{key}"
        if not isinstance(items, list):
            raise GenotypeError("entries must be a list", path)
        entries = []
        for n, item in enumerate(items):
            if not isinstance(item, dict) or "op" not in item or "source" not in item:
                raise GenotypeError("entry needs 'op' and 'source'", f"{path}[{n}]")
            if item.get("node", N_INPUT_NODES + n // 2) != N_INPUT_NODES + n // 2:
                raise GenotypeError(f"entry {n} belongs to node {N_INPUT_NODES + n // 2}", f"{path}[{n}].node")
            entries.append((item["op"], item["source"]))
        _check_entries(entries, catalog, path)
        cells[key] = tuple((op, int(src)) for op, src in entries)
    return Genotype(cells, catalog)
