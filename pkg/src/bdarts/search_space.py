"""Candidate operations, mixed edges and the cell DAG.

The operation catalog is an ordered tuple of names; architecture-weight
columns are indexed by catalog position, so the order is part of every
checkpoint and genotype file.
"""

import hashlib

import numpy as np

from .engine import functional as F
from .engine.module import ConvBN, Module, parameter
from .engine.tensor import Tensor
from .errors import CatalogError, ConfigError, DimensionError

FULL_CATALOG = (
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
    "zero",
)
CONV_OPS = frozenset(FULL_CATALOG[:4])
WEIGHT_FREE_OPS = frozenset(FULL_CATALOG[4:])

N_INPUT_NODES = 2
N_INTERMEDIATE = 4

CELL_KINDS = ("deep", "broad", "enhancement")


def make_catalog(include_skip=False):
    """The search space; skip_connect is dropped unless asked for."""
    return tuple(op for op in FULL_CATALOG if include_skip or op != "skip_connect")


def catalog_version(catalog):
    """Stable identifier for an ordered catalog."""
    digest = hashlib.sha256(",".join(catalog).encode()).hexdigest()[:12]
    return f"ops{len(catalog)}-{digest}"


def validate_catalog(catalog):
    catalog = tuple(catalog)
    unknown = [op for op in catalog if op not in FULL_CATALOG]
    if unknown:
        raise CatalogError(f"unknown operations {unknown}", "catalog")
    if len(set(catalog)) != len(catalog) or not catalog:
        raise CatalogError(f"catalog must list distinct operations, got {catalog}", "catalog")
    return catalog


def edge_list(n_intermediate=N_INTERMEDIATE):
    """(target, source) pairs; every intermediate node reads all earlier nodes."""
    return [(i, j) for i in range(N_INPUT_NODES, N_INPUT_NODES + n_intermediate) for j in range(i)]


def n_edges(n_intermediate=N_INTERMEDIATE):
    return sum(N_INPUT_NODES + m for m in range(n_intermediate))


# -- operations ----------------------------------------------------------------


class ReLUConvBN(Module):
    def __init__(self, cin, cout, kernel=1, stride=1, padding=0, affine=True, rng=None):
        self.op = ConvBN(cin, cout, kernel, stride, padding, affine=affine, rng=rng)

    def forward(self, x, xr=None):
        return self.op(F.relu(x) if xr is None else xr)


class _DepthwisePointwise(Module):
    # relu -> depthwise kxk -> pointwise 1x1 -> norm
    def __init__(self, c, kernel, stride, dilation, affine, rng):
        pad = dilation * (kernel - 1) // 2
        self.dw = parameter((c, 1, kernel, kernel), rng, fan_in=kernel * kernel)
        self.pw = ConvBN(c, c, 1, affine=affine, rng=rng)
        self.stride, self.padding, self.dilation, self.c = stride, pad, dilation, c

    def forward(self, xr):
        y = F.conv2d(xr, self.dw, self.stride, self.padding, self.dilation, groups=self.c)
        return self.pw(y)


class SepConv(Module):
    uses_relu = True

    def __init__(self, c, kernel, stride, affine=False, rng=None):
        self.unit1 = _DepthwisePointwise(c, kernel, stride, 1, affine, rng)
        self.unit2 = _DepthwisePointwise(c, kernel, 1, 1, affine, rng)

    def forward(self, x, xr=None):
        y = self.unit1(F.relu(x) if xr is None else xr)
        return self.unit2(F.relu(y))


class DilConv(Module):
    uses_relu = True

    def __init__(self, c, kernel, stride, affine=False, rng=None):
        self.unit = _DepthwisePointwise(c, kernel, stride, 2, affine, rng)

    def forward(self, x, xr=None):
        return self.unit(F.relu(x) if xr is None else xr)


class PoolBN(Module):
    uses_relu = False

    def __init__(self, kind, c, stride, affine=False):
        from .engine.module import BatchNorm2d
        self.kind, self.stride = kind, stride
        self.bn = BatchNorm2d(c, affine=affine)

    def forward(self, x, xr=None):
        gain, bias = self.bn.affine_params()
        return F.pool_bn(x, self.kind, 3, self.stride, 1, gain, bias, self.bn.eps)


class Identity(Module):
    uses_relu = False

    def forward(self, x, xr=None):
        return x


class FactorizedReduce(Module):
    """Halve resolution with two offset 1x1 stride-2 convolutions."""

    uses_relu = True

    def __init__(self, cin, cout, affine=False, rng=None):
        from .engine.module import BatchNorm2d
        half = cout // 2
        self.w1 = parameter((half, cin, 1, 1), rng, fan_in=cin)
        self.w2 = parameter((cout - half, cin, 1, 1), rng, fan_in=cin)
        self.bn = BatchNorm2d(cout, affine=affine)

    def forward(self, x, xr=None):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise DimensionError(f"factorized reduction needs even spatial dims, got {x.shape[2:]}")
        xr = F.relu(x) if xr is None else xr
        a = F.conv2d(xr, self.w1, stride=2)
        b = F.conv2d(xr[:, :, 1:, 1:], self.w2, stride=2)
        return self.bn(F.concat_channels([a, b]))


class Zero(Module):
    uses_relu = False

    def __init__(self, stride):
        self.stride = stride

    def forward(self, x, xr=None):
        b, c, h, w = x.shape
        s = self.stride
        return F.zeros_like(x, (b, c, (h + s - 1) // s, (w + s - 1) // s))


def build_operation(kind, c, stride, affine=False, rng=None):
    """One candidate operation mapping C channels to C channels."""
    if c < 1:
        raise ConfigError(f"channel count must be >= 1, got {c}", "C")
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}", "stride")
    if rng is None:
        rng = np.random.default_rng(0)
    if kind == "sep_conv_3x3":
        return SepConv(c, 3, stride, affine, rng)
    if kind == "sep_conv_5x5":
        return SepConv(c, 5, stride, affine, rng)
    if kind == "dil_conv_3x3":
        return DilConv(c, 3, stride, affine, rng)
    if kind == "dil_conv_5x5":
        return DilConv(c, 5, stride, affine, rng)
    if kind == "max_pool_3x3":
        return PoolBN("max", c, stride, affine)
    if kind == "avg_pool_3x3":
        return PoolBN("avg", c, stride, affine)
    if kind == "skip_connect":
        return Identity() if stride == 1 else FactorizedReduce(c, c, affine, rng)
    if kind == "zero":
        return Zero(stride)
    raise ConfigError(f"unknown operation {kind!r}", "op")


# -- mixed edges -----------------------------------------------------------------


def sample_channel_mask(c, k_pc, rng):
    """Boolean mask with exactly floor(c / k_pc) selected channels."""
    n = c // k_pc
    if n < 1:
        raise ConfigError(f"partial-channel factor {k_pc} leaves no channels out of {c}", "partial_channels")
    mask = np.zeros(c, dtype=bool)
    mask[rng.choice(c, size=n, replace=False)] = True
    return mask


class MixedEdge(Module):
    """Softmax-weighted sum of every catalog operation on one edge."""

    def __init__(self, c, stride, catalog, affine=False, k_pc=1, rng=None):
        self.catalog = tuple(catalog)
        self.stride = stride
        self.c = c
        self.k_pc = k_pc
        width = c // k_pc
        if width < 1:
            raise ConfigError(f"partial-channel factor {k_pc} leaves no channels out of {c}", "partial_channels")
        self.ops = [build_operation(kind, width, stride, affine, rng) for kind in self.catalog]

    def forward(self, x, alpha_row, mask=None):
        if mask is not None:
            return mixed_edge_partial_forward(x, self.ops, alpha_row, mask, self.stride)
        return mixed_edge_forward(x, self.ops, alpha_row)


def mixed_edge_forward(x, ops, alpha_row):
    """sum_o softmax(alpha_row)_o * o(x).

    ``alpha_row`` may be logits (1-d tensor of catalog length) or, when
    ``weights_given`` style callers pass precomputed weights, see
    ``mixed_edge_weighted``.
    """
    if alpha_row.shape != (len(ops),):
        raise DimensionError(f"alpha row has shape {alpha_row.shape}, catalog has {len(ops)} ops")
    return mixed_edge_weighted(x, ops, F.softmax(alpha_row))


def mixed_edge_weighted(x, ops, weights):
    xr = F.relu(x) if any(getattr(op, "uses_relu", False) for op in ops) else None
    outs = []
    for op in ops:
        if isinstance(op, Zero):
            outs.append(None)  # contributes nothing to value or gradient
            continue
        outs.append(op(x, xr))
    live = [o for o in outs if o is not None]
    if not live:
        # catalog of zeros only
        ref = Zero(getattr(ops[0], "stride", 1))(x)
        return ref
    shapes = {o.shape for o in live}
    if len(shapes) > 1:
        raise DimensionError(f"operation outputs disagree in shape: {sorted(shapes)}")
    return F.weighted_sum(weights, outs)


def mixed_edge_partial_forward(x, ops, alpha_row, mask, stride=1):
    """Partial-channel mixture: masked-in channels go through the ops, the rest are copied.

    On stride-2 edges the copied channels are reduced with a 2x2 max pool to
    match the output resolution.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x.shape[1],):
        raise DimensionError(f"mask length {mask.shape} does not match {x.shape[1]} channels")
    if not mask.any():
        raise ConfigError("partial-channel mask selects no channels", "mask")
    idx = np.flatnonzero(mask)
    y = mixed_edge_forward(F.channel_select(x, idx), ops, alpha_row)
    base = x if stride == 1 else F.pool2d(x, "max", kernel=2, stride=2, padding=0)
    return F.channel_merge(base, y, idx)


# -- cells -----------------------------------------------------------------------


class SearchCell(Module):
    """Cell whose every edge is a mixed edge.

    ``reduction`` cells apply stride 2 on edges leaving the two input nodes.
    ``reduction_prev`` marks that ``s0`` arrives at twice the resolution of ``s1``.
    """

    def __init__(self, kind, c_pp, c_p, c, catalog, reduction_prev=False, affine=False, k_pc=1, rng=None):
        if kind not in CELL_KINDS:
            raise ConfigError(f"unknown cell kind {kind!r}", "kind")
        if rng is None:
            rng = np.random.default_rng(0)
        self.kind = kind
        self.reduction = kind == "broad"
        self.c = c
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, affine, rng)
        else:
            self.pre0 = ReLUConvBN(c_pp, c, 1, 1, 0, affine, rng)
        self.pre1 = ReLUConvBN(c_p, c, 1, 1, 0, affine, rng)
        self.k_pc = k_pc
        self.edges = [
            MixedEdge(c, 2 if self.reduction and j < N_INPUT_NODES else 1, catalog, affine, k_pc, rng)
            for _, j in edge_list()
        ]

    @property
    def out_channels(self):
        return N_INTERMEDIATE * self.c

    def forward(self, s0, s1, alpha, mask_rng=None, name="cell"):
        if alpha.shape != (len(self.edges), len(self.edges[0].ops)):
            raise DimensionError(f"{name}: alpha shape {alpha.shape} does not match "
                                 f"{len(self.edges)} edges x {len(self.edges[0].ops)} ops")
        states = [self.pre0(s0), self.pre1(s1)]
        weights = F.softmax(alpha, axis=-1)
        e = 0
        for i in range(N_INPUT_NODES, N_INPUT_NODES + N_INTERMEDIATE):
            parts = []
            for j in range(i):
                edge = self.edges[e]
                try:
                    if self.k_pc > 1:
                        mask = sample_channel_mask(self.c, self.k_pc, mask_rng)
                        parts.append(mixed_edge_partial_forward(
                            states[j], edge.ops, alpha[e], mask, edge.stride))
                    else:
                        parts.append(mixed_edge_weighted(states[j], edge.ops, weights[e]))
                except DimensionError as exc:
                    raise DimensionError(f"{name} edge {e} ({j}->{i}): {exc}") from exc
                e += 1
            states.append(F.add_n(parts) if len(parts) > 1 else parts[0])
        return F.concat_channels(states[N_INPUT_NODES:])


class EvalCell(Module):
    """Discrete cell: each intermediate node sums two chosen operations."""

    def __init__(self, kind, entries, c_pp, c_p, c, reduction_prev=False, affine=True, rng=None):
        if kind not in CELL_KINDS:
            raise ConfigError(f"unknown cell kind {kind!r}", "kind")
        if rng is None:
            rng = np.random.default_rng(0)
        self.kind = kind
        self.reduction = kind == "broad"
        self.c = c
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_pp, c, affine, rng)
        else:
            self.pre0 = ReLUConvBN(c_pp, c, 1, 1, 0, affine, rng)
        self.pre1 = ReLUConvBN(c_p, c, 1, 1, 0, affine, rng)
        if len(entries) != 2 * N_INTERMEDIATE:
            raise ConfigError(f"expected {2 * N_INTERMEDIATE} genotype entries, got {len(entries)}")
        self.entries = [(op, int(src)) for op, src in entries]
        self.ops = [
            build_operation(op, c, 2 if self.reduction and src < N_INPUT_NODES else 1, affine, rng)
            for op, src in self.entries
        ]

    @property
    def out_channels(self):
        return N_INTERMEDIATE * self.c

    def forward(self, s0, s1, alpha=None, mask_rng=None, name="cell"):
        states = [self.pre0(s0), self.pre1(s1)]
        for n in range(N_INTERMEDIATE):
            parts = [self.ops[2 * n + k](states[self.entries[2 * n + k][1]]) for k in range(2)]
            states.append(F.add_n(parts))
        return F.concat_channels(states[N_INPUT_NODES:])


class AlphaTable:
    """Architecture weights: one [edges x ops] matrix per α-bearing cell kind."""

    def __init__(self, keys, catalog, n_edge=None, dtype=np.float64):
        self.catalog = validate_catalog(catalog)
        n_edge = n_edges() if n_edge is None else n_edge
        self.tables = {
            k: Tensor(np.zeros((n_edge, len(self.catalog)), dtype=dtype), requires_grad=True, name=f"alpha.{k}")
            for k in keys
        }

    def __getitem__(self, key):
        return self.tables[key]

    def keys(self):
        return list(self.tables)

    def tensors(self):
        return list(self.tables.values())

    def softmax(self):
        out = {}
        for k, t in self.tables.items():
            z = t.data - t.data.max(axis=1, keepdims=True)
            e = np.exp(z)
            out[k] = e / e.sum(axis=1, keepdims=True)
        return out

    def snapshot(self):
        return {k: t.data.copy() for k, t in self.tables.items()}

    def load(self, arrays):
        for k, arr in arrays.items():
            if k not in self.tables:
                raise CatalogError(f"unknown alpha table {k!r}", "alpha")
            if arr.shape != self.tables[k].shape:
                raise CatalogError(f"alpha.{k} has shape {arr.shape}, expected {self.tables[k].shape}", "alpha")
            self.tables[k].data = np.array(arr, dtype=self.tables[k].dtype)

    def to_dict(self):
        return {
            "catalog": list(self.catalog),
            "catalog_version": catalog_version(self.catalog),
            "edges": [list(e) for e in edge_list()],
            "alpha": {k: t.data.tolist() for k, t in self.tables.items()},
        }

    @classmethod
    def from_dict(cls, doc, expected_catalog=None):
        catalog = validate_catalog(doc["catalog"])
        if doc.get("catalog_version") != catalog_version(catalog):
            raise CatalogError("catalog_version does not match the listed operations", "catalog_version")
        if expected_catalog is not None and tuple(expected_catalog) != catalog:
            raise CatalogError(f"checkpoint catalog {catalog} differs from run catalog {tuple(expected_catalog)}",
                               "catalog")
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in doc["alpha"].items()}
        table = cls(list(arrays), catalog, n_edge=next(iter(arrays.values())).shape[0])
        table.load(arrays)
        return table
