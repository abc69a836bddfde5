"""Supernets and evaluation networks in broad and deep topologies.

Broad layout (u convolution blocks, v enhancement blocks)::

    stem -> [k deep cells, 1 broad cell] x u -> [1 enhancement cell] x v
                |   (broad-cell inputs)         |  (enhancement outputs)
                +------------> GAP taps <-------+ -> concat -> linear

Broad-cell outputs of every block feed the first enhancement block through
knowledge embeddings (1x1 convolutions) that also align resolution.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import functional as F
from .engine import profile
from .engine.module import BatchNorm2d, Conv2d, ConvBN, Linear, Module
from .engine.tensor import Tensor, no_grad
from .errors import CatalogError, ConfigError, DimensionError, NumericalError
from .search_space import AlphaTable, EvalCell, SearchCell, make_catalog

BROAD_KEYS = ("convolution", "enhancement")
DEEP_KEYS = ("normal", "reduction")


@dataclass
class BroadConfig:
    u: int = 2
    k: int = 0
    v: int = 1
    init_channels: int = 16
    num_classes: int = 10
    include_knowledge_embedding: bool = True
    stem: str = "cifar"

    def validate(self):
        if self.u < 1:
            raise ConfigError(f"need at least one convolution block, got {self.u}", "u")
        if self.k < 0:
            raise ConfigError(f"deep cells per block must be >= 0, got {self.k}", "k")
        if self.v < 1:
            raise ConfigError(f"need at least one enhancement block, got {self.v}", "v")
        _check_common(self)
        return self

    @property
    def n_cells(self):
        return self.u * (self.k + 1) + self.v


@dataclass
class DeepConfig:
    n_cells: int = 8
    reductions: tuple = None
    init_channels: int = 16
    num_classes: int = 10
    stem: str = "cifar"

    def __post_init__(self):
        if self.reductions is None:
            self.reductions = (self.n_cells // 3, 2 * self.n_cells // 3)
        self.reductions = tuple(int(r) for r in self.reductions)

    def validate(self):
        if self.n_cells < 1:
            raise ConfigError(f"need at least one cell, got {self.n_cells}", "n_cells")
        for r in self.reductions:
            if not 0 <= r < self.n_cells:
                raise ConfigError(f"reduction position {r} outside [0, {self.n_cells})", "reductions")
        _check_common(self)
        return self


def _check_common(cfg):
    if cfg.init_channels < 1:
        raise ConfigError(f"init_channels must be >= 1, got {cfg.init_channels}", "init_channels")
    if cfg.num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {cfg.num_classes}", "num_classes")
    if cfg.stem not in ("cifar", "imagenet"):
        raise ConfigError(f"unknown stem {cfg.stem!r}", "stem")


# -- building blocks -------------------------------------------------------------


class Stem(Module):
    """3x3 conv + norm to 3*C0 channels; the imagenet variant uses three stride-2 convs."""

    def __init__(self, c0, kind="cifar", rng=None):
        self.kind = kind
        if kind == "cifar":
            self.layers = [ConvBN(3, 3 * c0, 3, 1, 1, rng=rng)]
        else:
            mid = max(1, 3 * c0 // 2)
            self.layers = [ConvBN(3, mid, 3, 2, 1, rng=rng),
                           ConvBN(mid, 3 * c0, 3, 2, 1, rng=rng),
                           ConvBN(3 * c0, 3 * c0, 3, 2, 1, rng=rng)]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x if i == 0 else F.relu(x))
        return x


class KnowledgeEmbedding(Module):
    """1x1 convolution that optionally halves channels and subsamples by ``stride``."""

    def __init__(self, cin, halve=True, stride=1, rng=None):
        self.cin = cin
        self.cout = math.ceil(cin / 2) if halve else cin
        self.halve = halve
        self.stride = stride
        self.conv = Conv2d(cin, self.cout, 1, stride=stride, rng=rng)

    def forward(self, x):
        return self.conv(x)


class Subsample(Module):
    """Parameter-free stand-in used when knowledge embeddings are disabled."""

    def __init__(self, cin, stride=1):
        self.cin = self.cout = cin
        self.stride = stride
        self.halve = False

    def forward(self, x):
        return F.subsample(x, self.stride)


def _embedding(cin, halve, stride, enabled, rng):
    return KnowledgeEmbedding(cin, halve, stride, rng) if enabled else Subsample(cin, stride)


# -- networks --------------------------------------------------------------------


class Network(Module):
    """Shared forward plumbing: cell iteration, NaN guard, classifier."""

    topology = None

    def alpha_key(self, kind):
        if self.topology == "broad":
            return "enhancement" if kind == "enhancement" else "convolution"
        return "reduction" if kind == "broad" else "normal"

    @property
    def alpha_keys(self):
        return BROAD_KEYS if self.topology == "broad" else DEEP_KEYS

    @property
    def cells(self):
        return self._cells()

    def _run_cell(self, idx, cell, s0, s1):
        alpha = None
        if self.mode == "search":
            alpha = self._alpha[self.alpha_key(cell.kind)]
        name = f"cell{idx}[{cell.kind}]"
        out = cell(s0, s1, alpha, self._mask_rng, name)
        _check_finite(out, name)
        return out

    def arch_parameters(self):
        return [] if self._alpha is None else self._alpha.tensors()

    def _setup_alpha(self, mode, alpha, genotype, catalog):
        self.mode = mode
        self._mask_rng = None
        self._alpha = None
        self._gap = []
        if mode == "search":
            if alpha is None:
                alpha = AlphaTable(self.alpha_keys, catalog)
            if tuple(alpha.catalog) != tuple(catalog):
                raise CatalogError(f"alpha catalog {alpha.catalog} differs from {tuple(catalog)}", "catalog")
            if set(alpha.keys()) != set(self.alpha_keys):
                raise CatalogError(f"alpha tables {alpha.keys()} do not match {list(self.alpha_keys)}", "alpha")
            self._alpha = alpha
        elif mode == "eval":
            if genotype is None:
                raise ConfigError("eval mode requires a genotype", "genotype")
            if tuple(genotype.catalog) != tuple(catalog):
                raise CatalogError(
                    f"genotype catalog {genotype.catalog_version} does not match this run's catalog",
                    "catalog")
            if set(genotype.cells) != set(self.alpha_keys):
                raise CatalogError(f"genotype cells {sorted(genotype.cells)} do not match "
                                   f"{list(self.alpha_keys)}", "genotype")
        else:
            raise ConfigError(f"unknown mode {mode!r}", "mode")

    def set_mask_rng(self, rng):
        self._mask_rng = rng

    def _make_cell(self, kind, c_pp, c_p, c, reduction_prev, rng):
        if self.mode == "search":
            return SearchCell(kind, c_pp, c_p, c, self.catalog, reduction_prev,
                              affine=False, k_pc=self.k_pc, rng=rng)
        entries = self._genotype.cells[self.alpha_key(kind)]
        return EvalCell(kind, entries, c_pp, c_p, c, reduction_prev, affine=True, rng=rng)

    @property
    def gap_vectors(self):
        """GAP vectors of the most recent forward pass."""
        return list(self._gap)


def _check_finite(t, where):
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"non-finite activation in {where}")


class BroadNet(Network):
    topology = "broad"

    def __init__(self, config, mode="search", genotype=None, alpha=None, catalog=None,
                 k_pc=1, seed=0, dtype=np.float64):
        config.validate()
        self.config = config
        self.k_pc = k_pc
        self.catalog = tuple(catalog) if catalog is not None else (
            tuple(genotype.catalog) if genotype is not None else make_catalog(False))
        self._setup_alpha(mode, alpha, genotype, self.catalog)
        self._genotype = genotype
        rng = np.random.default_rng(seed)
        c0, u, k, v = config.init_channels, config.u, config.k, config.v
        emb = config.include_knowledge_embedding

        self.stem = Stem(c0, config.stem, rng)
        c_block_in = 3 * c0
        self.conv_cells = []
        self.gap_embeddings = []
        broad_out = []
        for b in range(1, u + 1):
            cells = []
            c_pp = c_p = c_block_in
            c_deep = c0 * 2 ** (b - 1)
            for _ in range(k):
                cell = self._make_cell("deep", c_pp, c_p, c_deep, False, rng)
                cells.append(cell)
                c_pp, c_p = c_p, cell.out_channels
            self.gap_embeddings.append(_embedding(c_p, True, 1, emb, rng))
            cell = self._make_cell("broad", c_pp, c_p, c0 * 2 ** b, False, rng)
            cells.append(cell)
            self.conv_cells.extend(cells)
            c_block_in = cell.out_channels
            broad_out.append(cell.out_channels)

        # knowledge embeddings into the first enhancement block
        self.enh_embeddings = [_embedding(broad_out[b], b != u - 1, 2 ** (u - 1 - b), emb, rng)
                               for b in range(u)]
        c_enh_in = sum(e.cout for e in self.enh_embeddings)
        c_e = c0 * 2 ** u
        self.enhancement = []
        c_pp = c_p = c_enh_in
        for e in range(v):
            cell = self._make_cell("enhancement", c_pp, c_p, c_e, False, rng)
            self.enhancement.append(cell)
            c_pp, c_p = c_p, cell.out_channels
            # the last enhancement output keeps its channels on the way to GAP
            self.gap_embeddings.append(_embedding(cell.out_channels, e != v - 1, 1, emb, rng))
        self.gap_width = sum(e.cout for e in self.gap_embeddings)
        self.classifier = Linear(self.gap_width, config.num_classes, rng)
        self.assign_names()
        if dtype != np.float64:
            self.set_dtype(dtype)

    def _cells(self):
        return list(self.conv_cells) + list(self.enhancement)

    @property
    def blocks(self):
        per = self.config.k + 1
        return [self.conv_cells[i:i + per] for i in range(0, len(self.conv_cells), per)]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected input [B,3,H,W], got {x.shape}")
        s = self.stem(x)
        _check_finite(s, "stem")
        taps, broad_outputs = [], []
        idx = 0
        for b, cells in enumerate(self.blocks):
            s0 = s1 = s
            for cell in cells:
                if cell.kind == "broad":
                    taps.append(self.gap_embeddings[b](s1))
                out = self._run_cell(idx, cell, s0, s1)
                idx += 1
                s0, s1 = s1, out
            s = s1
            broad_outputs.append(s)

        aligned = [emb(t) for emb, t in zip(self.enh_embeddings, broad_outputs)]
        ref = aligned[-1].shape[2:]
        for b, t in enumerate(aligned):
            if t.shape[2:] != ref:
                raise DimensionError(f"block {b + 1} embedding gives {t.shape[2:]}, enhancement expects {ref}")
        s = F.concat_channels(aligned) if len(aligned) > 1 else aligned[0]

        prev2 = prev1 = s
        for e, cell in enumerate(self.enhancement):
            out = self._run_cell(idx, cell, prev2, prev1)
            idx += 1
            taps.append(self.gap_embeddings[len(self.blocks) + e](out))
            prev2, prev1 = prev1, out

        gap = [F.global_avg_pool(t) for t in taps]
        self._gap = [g.data for g in gap]
        logits = self.classifier(F.concat_channels(gap) if len(gap) > 1 else gap[0])
        _check_finite(logits, "classifier")
        return logits


def broad_classifier_width(config):
    """Classifier input width implied by a broad config (closed form)."""
    c0, u, k, v = config.init_channels, config.u, config.k, config.v

    def tap(c, halve):
        return math.ceil(c / 2) if halve and config.include_knowledge_embedding else c

    width = 0
    for b in range(1, u + 1):
        # broad-cell input: stem output, previous broad output, or last deep cell output
        if k == 0 and b == 1:
            cin = 3 * c0
        else:
            cin = 4 * c0 * 2 ** (b - 1)
        width += tap(cin, True)
    c_out = 4 * c0 * 2 ** u
    width += (v - 1) * tap(c_out, True) + c_out
    return int(width)


class DeepNet(Network):
    topology = "deep"

    def __init__(self, config, mode="search", genotype=None, alpha=None, catalog=None,
                 k_pc=1, seed=0, dtype=np.float64):
        config.validate()
        self.config = config
        self.k_pc = k_pc
        self.catalog = tuple(catalog) if catalog is not None else (
            tuple(genotype.catalog) if genotype is not None else make_catalog(True))
        self._setup_alpha(mode, alpha, genotype, self.catalog)
        self._genotype = genotype
        rng = np.random.default_rng(seed)
        c = config.init_channels
        self.stem = Stem(c, config.stem, rng)
        c_pp = c_p = 3 * c
        self.cell_list = []
        reduction_prev = False
        for i in range(config.n_cells):
            kind = "broad" if i in config.reductions else "deep"
            if kind == "broad":
                c *= 2
            cell = self._make_cell(kind, c_pp, c_p, c, reduction_prev, rng)
            self.cell_list.append(cell)
            reduction_prev = kind == "broad"
            c_pp, c_p = c_p, cell.out_channels
        self.gap_width = c_p
        self.classifier = Linear(c_p, config.num_classes, rng)
        self.assign_names()
        if dtype != np.float64:
            self.set_dtype(dtype)

    def _cells(self):
        return list(self.cell_list)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected input [B,3,H,W], got {x.shape}")
        s0 = s1 = self.stem(x)
        _check_finite(s1, "stem")
        for i, cell in enumerate(self.cell_list):
            s0, s1 = s1, self._run_cell(i, cell, s0, s1)
        gap = F.global_avg_pool(s1)
        self._gap = [gap.data]
        logits = self.classifier(gap)
        _check_finite(logits, "classifier")
        return logits


def build_broad(config, mode="search", genotype=None, alpha=None, catalog=None, **kw):
    return BroadNet(config, mode, genotype, alpha, catalog, **kw)


def build_deep(config, mode="search", genotype=None, alpha=None, catalog=None, **kw):
    return DeepNet(config, mode, genotype, alpha, catalog, **kw)


# -- estimators ------------------------------------------------------------------


def count_params(net):
    """Total size of the network-weight tensors (architecture weights excluded)."""
    return int(sum(p.size for p in net.parameters()))


def _profile(net, input_hw, batch=2):
    h, w = (input_hw, input_hw) if np.isscalar(input_hw) else input_hw
    dtype = net.classifier.weight.dtype
    x = Tensor(np.zeros((batch, 3, h, w), dtype=dtype))
    rng_state = None if net._mask_rng is None else net._mask_rng.bit_generator.state
    with no_grad(), profile.recording() as records:
        net(x)
    if rng_state is not None:
        net._mask_rng.bit_generator.state = rng_state
    return records, batch


def mult_adds(net, input_hw):
    """Multiply-accumulates of conv and linear layers for one image."""
    records, batch = _profile(net, input_hw)
    return int(sum(r["mult_adds"] for r in records) // batch)


def activation_footprint(net, batch, input_hw):
    """Sum of every primitive's output element count at the given batch size."""
    records, b = _profile(net, input_hw)
    per_image = sum(int(np.prod(r["shape"])) for r in records) // b
    return int(per_image * batch)


def summary(net, input_hw):
    """Per-layer records (shape, params, mult-adds) and a text table."""
    records, batch = _profile(net, input_hw)
    rows = []
    for r in records:
        rows.append({
            "layer": r["layer"] or "<root>",
            "op": r["op"],
            "shape": [1] + list(r["shape"][1:]),
            "params": r["params"],
            "mult_adds": r["mult_adds"] // batch,
        })
    lines = [f"{'layer':<48} {'op':<16} {'shape':<20} {'params':>9} {'mult_adds':>12}"]
    for r in rows:
        lines.append(f"{r['layer'][-48:]:<48} {r['op']:<16} {str(tuple(r['shape'])):<20} "
                     f"{r['params']:>9} {r['mult_adds']:>12}")
    lines.append(f"total params {count_params(net)}  mult_adds {sum(r['mult_adds'] for r in rows)}")
    return rows, "\n".join(lines)
