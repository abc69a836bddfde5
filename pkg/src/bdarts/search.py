"""Bilevel search: alternating architecture and network-weight updates.

Each iteration first moves the architecture weights on a batch from the
α split, then the network weights on a batch from the w split. The α
learning rate follows a confidence schedule, a warmup freeze, or stays
constant.
"""

import contextlib
import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .analysis import count_convolutions, derive_genotype, weight_free_fraction
from .data import SyntheticSpec, augment, batch_indices, load_cifar10_bin, parse_source, split_half, synthetic
from .engine import functional as F
from .engine.optim import AdamState, SgdState, adam_step, clip_grad_norm, cosine_lr, sgd_step
from .engine.tensor import Tensor, backward
from .errors import ConfigError, DataFormatError, NumericalError, UsageError
from .search_space import AlphaTable, catalog_version, make_catalog
from .topology import BroadConfig, DeepConfig, build_broad, build_deep

MITIGATIONS = ("none", "warmup", "clr")


# -- confidence learning rate ------------------------------------------------------


@dataclass(frozen=True)
class ClrSchedule:
    """α learning rate (t/T)^β · lr_arch over 1-based epochs."""

    T: int
    beta: float
    lr_arch: float

    def __post_init__(self):
        if self.T < 1:
            raise UsageError(f"T must be >= 1, got {self.T}")
        if self.beta < 0:
            raise UsageError(f"beta must be >= 0, got {self.beta}")

    def __call__(self, t):
        return clr(t, self)

    def at_step(self, t, step, steps_per_epoch):
        """Per-step variant: the epoch counter advances fractionally within an epoch."""
        if not 1 <= t <= self.T or not 0 <= step < steps_per_epoch:
            raise UsageError(f"step {step} of epoch {t} outside the schedule")
        frac = ((t - 1) * steps_per_epoch + step + 1) / (self.T * steps_per_epoch)
        return frac ** self.beta * self.lr_arch


def clr(t, schedule):
    if not 1 <= t <= schedule.T:
        raise UsageError(f"epoch {t} outside [1, {schedule.T}]")
    if t == schedule.T:
        return schedule.lr_arch
    return (t / schedule.T) ** schedule.beta * schedule.lr_arch


# -- configuration -------------------------------------------------------------------


@dataclass
class SearchConfig:
    preset: str = "bdarts"
    topology: str = "broad"
    u: int = 2
    k: int = 0
    v: int = 1
    n_cells: int = 8
    init_channels: int = 16
    data: str = "cifar10:cifar-10-batches-bin"
    synthetic_samples: int = 512
    synthetic_classes: int = 4
    image_size: int = 32
    noise: float = 0.5
    data_seed: int = 0
    epochs: int = 50
    batch_size: int = 256
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    lr_arch: float = 3e-4
    arch_betas: tuple = (0.5, 0.999)
    arch_weight_decay: float = 1e-3
    order: int = 1
    xi: float = None  # None: the current w learning rate
    mitigation: str = "clr"
    beta: float = 2.0
    warmup_epochs: int = 15
    clr_per_step: bool = False
    include_skip: bool = False
    partial_channels: int = 1
    augment: bool = True
    dtype: str = "float64"
    seed: int = 0

    def validate(self):
        if self.topology not in ("broad", "deep"):
            raise ConfigError(f"unknown topology {self.topology!r}", "topology")
        for name in ("epochs", "batch_size", "init_channels", "synthetic_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, name)}", name)
        for name in ("lr", "lr_arch", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"must be positive, got {getattr(self, name)}", name)
        for name in ("momentum", "weight_decay", "arch_weight_decay", "noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, name)}", name)
        if len(self.arch_betas) != 2 or not all(0 <= b < 1 for b in self.arch_betas):
            raise ConfigError(f"need two values in [0, 1), got {self.arch_betas}", "arch_betas")
        if self.order not in (1, 2):
            raise ConfigError(f"must be 1 or 2, got {self.order}", "order")
        if self.xi is not None and self.xi < 0:
            raise ConfigError(f"must be >= 0, got {self.xi}", "xi")
        if self.mitigation not in MITIGATIONS:
            raise ConfigError(f"must be one of {MITIGATIONS}, got {self.mitigation!r}", "mitigation")
        if self.beta < 0 or not math.isfinite(self.beta):
            raise ConfigError(f"must be >= 0, got {self.beta}", "beta")
        if self.mitigation == "warmup" and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"must lie in [0, epochs={self.epochs}), got {self.warmup_epochs}",
                              "warmup_epochs")
        if self.partial_channels < 1:
            raise ConfigError(f"must be >= 1, got {self.partial_channels}", "partial_channels")
        if self.init_channels % self.partial_channels:
            raise ConfigError(f"{self.partial_channels} must divide init_channels={self.init_channels}",
                              "partial_channels")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"must be float32 or float64, got {self.dtype!r}", "dtype")
        try:
            parse_source(self.data)
        except UsageError as exc:
            raise ConfigError(str(exc), "data") from None
        if self.topology == "broad":
            self.broad_config().validate()
        else:
            self.deep_config().validate()
        return self

    def broad_config(self, num_classes=10):
        return BroadConfig(self.u, self.k, self.v, self.init_channels, num_classes)

    def deep_config(self, num_classes=10):
        return DeepConfig(self.n_cells, None, self.init_channels, num_classes)

    @property
    def catalog(self):
        return make_catalog(self.include_skip)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["arch_betas"] = list(self.arch_betas)
        return d

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}", unknown[0])
        doc = dict(doc)
        if "arch_betas" in doc:
            doc["arch_betas"] = tuple(doc["arch_betas"])
        return cls(**doc)


_DESK = dict(data="synthetic", image_size=16, init_channels=4, batch_size=32, epochs=20,
             synthetic_samples=512, synthetic_classes=4)

PRESETS = {
    "bdarts": dict(topology="broad", batch_size=256, lr=0.1, lr_arch=3e-4,
                   mitigation="clr", beta=2.0, include_skip=False),
    "darts": dict(topology="deep", n_cells=8, batch_size=64, lr=0.025, lr_arch=3e-4,
                  mitigation="none", beta=4.0, include_skip=True),
    "bpcdarts": dict(topology="broad", batch_size=512, lr=0.2, lr_arch=6e-4,
                     mitigation="warmup", warmup_epochs=15, beta=2.0, include_skip=True,
                     partial_channels=4),
}
for _name in list(PRESETS):
    PRESETS[f"{_name}-desk"] = {**PRESETS[_name], **_DESK}
# four channels cannot be split four ways at every width; halve the sampling
PRESETS["bpcdarts-desk"]["partial_channels"] = 2


def preset_config(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", "preset")
    cfg = SearchConfig(preset=name, **PRESETS[name])
    for key, val in overrides.items():
        if val is None:
            continue
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config field {key!r}", key)
        setattr(cfg, key, val)
    return cfg


def arch_lr(config, t, step=None, steps_per_epoch=None):
    """Effective α learning rate for epoch ``t`` (and optionally a step within it)."""
    if config.mitigation == "none":
        return config.lr_arch
    if config.mitigation == "warmup":
        return 0.0 if t <= config.warmup_epochs else config.lr_arch
    sched = ClrSchedule(config.epochs, config.beta, config.lr_arch)
    if config.clr_per_step and step is not None:
        return sched.at_step(t, step, steps_per_epoch)
    return sched(t)


# -- data and network ----------------------------------------------------------------


def load_search_data(config):
    """Dataset per ``config.data``, split in half: (w split, α split)."""
    kind, directory = parse_source(config.data)
    if kind == "synthetic":
        spec = SyntheticSpec(config.synthetic_samples, config.synthetic_classes, config.image_size,
                             config.noise, config.data_seed)
        try:
            full = synthetic(spec)
        except UsageError as exc:
            raise ConfigError(str(exc), "data") from None
    else:
        if not os.path.isdir(directory):
            raise DataFormatError(f"CIFAR-10 directory {directory!r} not found")
        full, _ = load_cifar10_bin(directory)
    return split_half(full, config.data_seed)


def _streams(seed):
    init, shuffle, aug, mask = np.random.SeedSequence(seed).spawn(4)
    return int(init.generate_state(1)[0]), {
        "shuffle": np.random.default_rng(shuffle),
        "augment": np.random.default_rng(aug),
        "mask": np.random.default_rng(mask),
    }


def build_network(config, num_classes, init_seed):
    dtype = np.dtype(config.dtype).type
    kw = dict(catalog=config.catalog, k_pc=config.partial_channels, seed=init_seed, dtype=dtype)
    if config.topology == "broad":
        return build_broad(config.broad_config(num_classes), "search", **kw)
    return build_deep(config.deep_config(num_classes), "search", **kw)


# -- gradients -----------------------------------------------------------------------


@contextlib.contextmanager
def _frozen(params):
    # skip gradient work for tensors that are not being differentiated
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def loss_and_grads(net, batch, wrt, frozen=()):
    """Cross-entropy on ``batch`` and its gradient with respect to ``wrt``.

    Returns (loss, correct count, list of gradient arrays).
    """
    x, y = batch
    for p in wrt:
        p.grad = None
    with _frozen(frozen):
        logits = net(Tensor(np.asarray(x, dtype=net.classifier.weight.dtype)))
        loss = F.cross_entropy(logits, y)
        if not np.isfinite(loss.data):
            raise NumericalError("non-finite loss")
        backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in wrt]
    for p in wrt:
        p.grad = None
    correct = int(np.sum(np.argmax(logits.data, axis=1) == np.asarray(y)))
    return float(loss.data), correct, grads


def alpha_grad_first_order(net, valid_batch):
    """∇α L_val at the current network weights."""
    loss, correct, grads = loss_and_grads(net, valid_batch, net.arch_parameters(), net.parameters())
    return grads, loss, correct


def alpha_step_first_order(net, adam, valid_batch, lr_eff):
    if lr_eff < 0:
        raise UsageError(f"lr_eff must be >= 0, got {lr_eff}")
    grads, loss, correct = alpha_grad_first_order(net, valid_batch)
    adam_step(net.arch_parameters(), grads, lr_eff, adam)
    return loss, correct


def _norm(arrays):
    return math.sqrt(sum(float(np.vdot(a, a)) for a in arrays))


def alpha_grad_second_order(net, train_batch, valid_batch, xi, events=None, fd_scale=0.01):
    """Unrolled α gradient with a finite-difference Hessian-vector correction.

    Evaluates ∇α L_val at w' = w - ξ ∇w L_train(w, α), then subtracts
    ξ (∇α L_train(w⁺) - ∇α L_train(w⁻)) / 2ε with w± = w ± ε ∇w' L_val and
    ε = fd_scale / ‖∇w' L_val‖. The network weights are restored exactly.
    """
    if xi < 0:
        raise UsageError(f"xi must be >= 0, got {xi}")
    w, a = net.parameters(), net.arch_parameters()
    w0 = [p.data for p in w]
    try:
        if xi != 0:
            _, _, gw = loss_and_grads(net, train_batch, w, a)
            for p, d, g in zip(w, w0, gw):
                p.data = d - xi * g
        loss, correct, grads = loss_and_grads(net, valid_batch, w + a)
        gw_val, ga = grads[:len(w)], grads[len(w):]
        if xi == 0:
            return ga, loss, correct
        norm = _norm(gw_val)
        if norm == 0.0:
            if events is not None:
                events.append("zero validation-gradient norm: second-order correction skipped")
            return ga, loss, correct
        eps = fd_scale / norm
        for p, d, g in zip(w, w0, gw_val):
            p.data = d + eps * g
        _, _, g_plus = loss_and_grads(net, train_batch, a, w)
        for p, d, g in zip(w, w0, gw_val):
            p.data = d - eps * g
        _, _, g_minus = loss_and_grads(net, train_batch, a, w)
        ga = [g - xi * (gp - gm) / (2 * eps) for g, gp, gm in zip(ga, g_plus, g_minus)]
        return ga, loss, correct
    finally:
        for p, d in zip(w, w0):
            p.data = d


def alpha_step_second_order(net, adam, train_batch, valid_batch, xi, lr_eff, events=None):
    if lr_eff < 0:
        raise UsageError(f"lr_eff must be >= 0, got {lr_eff}")
    grads, loss, correct = alpha_grad_second_order(net, train_batch, valid_batch, xi, events)
    adam_step(net.arch_parameters(), grads, lr_eff, adam)
    return loss, correct


def weight_step(net, sgd, train_batch, lr, grad_clip):
    w = net.parameters()
    loss, correct, grads = loss_and_grads(net, train_batch, w, net.arch_parameters())
    for p, g in zip(w, grads):
        p.grad = g
    clip_grad_norm(w, grad_clip)
    sgd_step(w, None, lr, sgd)
    for p in w:
        p.grad = None
    return loss, correct


# -- metrics and checkpoints ----------------------------------------------------------


def rng_digest(rng):
    state = json.dumps(rng.bit_generator.state, sort_keys=True)
    return hashlib.sha256(state.encode()).hexdigest()[:16]


class MetricsLog:
    """One record per epoch; timings live apart so records stay reproducible."""

    def __init__(self, records=None, timings=None):
        self.records = list(records or [])
        self.timings = list(timings or [])

    def __len__(self):
        return len(self.records)

    def append(self, record, timing=None):
        self.records.append(record)
        if timing is not None:
            self.timings.append(timing)

    def column(self, key):
        return [r[key] for r in self.records]

    def trajectory(self):
        return [{k: np.asarray(v) for k, v in r["alpha_softmax"].items()} for r in self.records]

    @staticmethod
    def dumps(record):
        return json.dumps(record, sort_keys=True) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(self.dumps(rec))

    @classmethod
    def read(cls, path):
        records = []
        with open(path) as fh:
            for n, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except ValueError as exc:
                    raise DataFormatError(f"{path}:{n}: bad JSON record ({exc})") from None
        return cls(records)


CHECKPOINT_NPZ = "checkpoint.npz"
CHECKPOINT_META = "checkpoint.json"


def _atomic_write(path, writer, mode="w"):
    tmp = path + ".tmp"
    with open(tmp, mode) as fh:
        writer(fh)
    os.replace(tmp, path)


def save_checkpoint(directory, epoch, net, sgd, adam, rngs, config, log):
    arrays = {}
    for i, p in enumerate(net.parameters()):
        arrays[f"w{i}"] = p.data
        arrays[f"sgd{i}"] = sgd.buffers[i]
    for i, _ in enumerate(net.arch_parameters()):
        arrays[f"adam_m{i}"] = adam.m[i]
        arrays[f"adam_v{i}"] = adam.v[i]
    for k, t in net._alpha.tables.items():
        arrays[f"alpha.{k}"] = t.data
    _atomic_write(os.path.join(directory, CHECKPOINT_NPZ), lambda fh: np.savez(fh, **arrays), "wb")
    meta = {
        "epoch": epoch,
        "adam_t": adam.t,
        "rng": {k: r.bit_generator.state for k, r in rngs.items()},
        "config": config.to_dict(),
        "catalog_version": catalog_version(config.catalog),
        "records": log.records,
    }
    _atomic_write(os.path.join(directory, CHECKPOINT_META), lambda fh: json.dump(meta, fh))
    write_alpha(os.path.join(directory, "alpha.json"), net._alpha)
    return os.path.join(directory, CHECKPOINT_META)


def write_alpha(path, alpha):
    _atomic_write(path, lambda fh: json.dump(alpha.to_dict(), fh, indent=1))


def read_alpha(path, expected_catalog=None):
    """AlphaTable from an ``alpha.json`` file or a checkpoint directory."""
    if os.path.isdir(path):
        path = os.path.join(path, "alpha.json")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except ValueError as exc:
        raise DataFormatError(f"{path}: not valid JSON ({exc})") from None
    return AlphaTable.from_dict(doc, expected_catalog)


def load_checkpoint(directory, net, sgd, adam, rngs):
    """Restore state in place; returns (epoch, records, saved config dict)."""
    with open(os.path.join(directory, CHECKPOINT_META)) as fh:
        meta = json.load(fh)
    with np.load(os.path.join(directory, CHECKPOINT_NPZ)) as z:
        params = net.parameters()
        if sum(1 for k in z.files if k.startswith("w")) != len(params):
            raise ConfigError("checkpoint does not match this network", "resume")
        for i, p in enumerate(params):
            if z[f"w{i}"].shape != p.shape:
                raise ConfigError(f"checkpoint tensor {i} has shape {z[f'w{i}'].shape}, expected {p.shape}",
                                  "resume")
            p.data = z[f"w{i}"].copy()
            sgd.buffers[i] = z[f"sgd{i}"].copy()
        net._alpha.load({k[len("alpha."):]: z[k] for k in z.files if k.startswith("alpha.")})
        for i, _ in enumerate(net.arch_parameters()):
            adam.m[i] = z[f"adam_m{i}"].copy()
            adam.v[i] = z[f"adam_v{i}"].copy()
    adam.t = meta["adam_t"]
    for k, r in rngs.items():
        r.bit_generator.state = meta["rng"][k]
    return meta["epoch"], meta["records"], meta["config"]


# -- the loop ------------------------------------------------------------------------


@dataclass
class SearchResult:
    genotype: object
    log: MetricsLog
    net: object
    events: list


def _pairs(n_w, n_a, batch_size, rng):
    idx_w = batch_indices(n_w, batch_size, rng)
    idx_a = batch_indices(n_a, batch_size, rng)
    steps = max(len(idx_w), len(idx_a))
    return [(idx_a[s % len(idx_a)], idx_w[s % len(idx_w)]) for s in range(steps)]


def run_search(config, train_w=None, train_a=None, out_dir=None, resume=False, progress=None):
    """Run the alternating search and return a ``SearchResult``.

    With ``out_dir`` set, metrics stream to ``metrics.jsonl`` and a checkpoint
    is written after every epoch; ``resume`` continues from that checkpoint.
    """
    config.validate()
    if train_w is None or train_a is None:
        train_w, train_a = load_search_data(config)
    if train_w.num_classes != train_a.num_classes:
        raise DataFormatError("the two splits disagree on the number of classes")
    init_seed, rngs = _streams(config.seed)
    net = build_network(config, train_w.num_classes, init_seed)
    net.set_mask_rng(rngs["mask"])
    w, a = net.parameters(), net.arch_parameters()
    sgd = SgdState.create(w, config.momentum, config.weight_decay)
    adam = AdamState.create(a, config.arch_betas, 1e-8, config.arch_weight_decay)
    log = MetricsLog()
    start = 1
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if resume and os.path.exists(os.path.join(out_dir, CHECKPOINT_META)):
            done, records, saved = load_checkpoint(out_dir, net, sgd, adam, rngs)
            if saved != config.to_dict():
                raise ConfigError("checkpoint was written by a different configuration", "resume")
            log = MetricsLog(records)
            start = done + 1
        log.write(os.path.join(out_dir, "metrics.jsonl"))
        if start == 1:
            open(os.path.join(out_dir, "timings.jsonl"), "w").close()
    last_ckpt = os.path.join(out_dir, CHECKPOINT_META) if out_dir and start > 1 else None
    events = []
    catalog = list(config.catalog)

    for t in range(start, config.epochs + 1):
        lr_w = cosine_lr(t, config.epochs, config.lr)
        xi = lr_w if config.xi is None else config.xi
        pairs = _pairs(len(train_w), len(train_a), config.batch_size, rngs["shuffle"])
        tot = {"tl": 0.0, "tc": 0, "tn": 0, "vl": 0.0, "vc": 0, "vn": 0}
        t0 = time.perf_counter()
        lr_eff = 0.0
        for step, (ia, iw) in enumerate(pairs):
            lr_eff = arch_lr(config, t, step, len(pairs))
            xa, ya = train_a.images[ia], train_a.labels[ia]
            xw, yw = train_w.images[iw], train_w.labels[iw]
            if config.augment:
                xw = augment(xw, rngs["augment"])
            try:
                if config.order == 1:
                    vl, vc = alpha_step_first_order(net, adam, (xa, ya), lr_eff)
                else:
                    vl, vc = alpha_step_second_order(net, adam, (xw, yw), (xa, ya), xi, lr_eff, events)
                tl, tc = weight_step(net, sgd, (xw, yw), lr_w, config.grad_clip)
            except NumericalError as exc:
                raise NumericalError(f"epoch {t} step {step + 1}: {exc}", checkpoint=last_ckpt) from exc
            tot["vl"] += vl * len(ia)
            tot["vc"] += vc
            tot["vn"] += len(ia)
            tot["tl"] += tl * len(iw)
            tot["tc"] += tc
            tot["tn"] += len(iw)
        elapsed = time.perf_counter() - t0

        sm = net._alpha.softmax()
        genotype = derive_genotype(net._alpha)
        record = {
            "epoch": t,
            "lr": lr_w,
            "lr_arch": lr_eff,
            "train_loss": tot["tl"] / tot["tn"],
            "train_acc": tot["tc"] / tot["tn"],
            "val_loss": tot["vl"] / tot["vn"],
            "val_acc": tot["vc"] / tot["vn"],
            "gamma": count_convolutions(genotype),
            "weight_free_fraction": weight_free_fraction(genotype),
            "catalog": catalog,
            "alpha_softmax": {k: v.tolist() for k, v in sm.items()},
            "rng": {k: rng_digest(r) for k, r in rngs.items()},
        }
        timing = {"epoch": t, "steps": len(pairs), "epoch_seconds": elapsed,
                  "step_seconds": elapsed / len(pairs)}
        log.append(record, timing)
        if out_dir is not None:
            with open(os.path.join(out_dir, "metrics.jsonl"), "a") as fh:
                fh.write(MetricsLog.dumps(record))
            with open(os.path.join(out_dir, "timings.jsonl"), "a") as fh:
                fh.write(json.dumps(timing) + "\n")
            last_ckpt = save_checkpoint(out_dir, t, net, sgd, adam, rngs, config, log)
        if progress is not None:
            progress(record, timing)

    return SearchResult(derive_genotype(net._alpha), log, net, events)
