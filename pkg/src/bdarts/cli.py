"""Command-line entry point: search, derive, analyze, bench, eval.

Exit codes: 0 success, 2 configuration or catalog problem, 3 unreadable or
malformed data, 4 numerical divergence. ``BDARTS_NUM_THREADS`` caps the
BLAS worker threads when set before the first NumPy import.
"""

import os

_threads = os.environ.get("BDARTS_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import statistics  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402

import numpy as np  # noqa: E402

from . import analysis, search  # noqa: E402
from .data import SyntheticSpec, augment, batch_indices, load_cifar10_bin, parse_source, split_half, synthetic  # noqa: E402
from .engine import functional as F  # noqa: E402
from .engine import kernels  # noqa: E402
from .engine.optim import SgdState, clip_grad_norm, cosine_lr, sgd_step  # noqa: E402
from .engine.tensor import Tensor, backward, no_grad  # noqa: E402
from .errors import BdartsError, ConfigError, DataFormatError, UsageError  # noqa: E402
from .search_space import make_catalog  # noqa: E402
from .topology import BroadConfig, DeepConfig, activation_footprint, build_broad, build_deep, count_params  # noqa: E402


def _write(path, text):
    mode = "wb" if isinstance(text, bytes) else "w"
    with open(path, mode) as fh:
        fh.write(text)


# -- search -------------------------------------------------------------------------


_SEARCH_FLAGS = ("order", "mitigation", "beta", "warmup_epochs", "batch_size", "epochs", "seed",
                 "partial_channels", "data", "lr", "lr_arch", "xi", "init_channels", "dtype")


def resolve_config(args):
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = search.SearchConfig.from_dict(json.load(fh))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}", "config") from None
    else:
        cfg = search.preset_config(args.preset)
    for flag in _SEARCH_FLAGS:
        val = getattr(args, flag)
        if val is not None:
            setattr(cfg, flag, val)
    if args.include_skip:
        cfg.include_skip = True
    if args.clr_per_step:
        cfg.clr_per_step = True
    if args.no_augment:
        cfg.augment = False
    return cfg.validate()


def _summary_text(cfg, result, wall):
    first = analysis.detect_first_update_epoch(result.log.trajectory())
    g = result.genotype
    lines = [
        f"preset          {cfg.preset} ({cfg.topology}, {len(cfg.catalog)} ops, seed {cfg.seed})",
        f"epochs          {cfg.epochs}",
        f"mitigation      {cfg.mitigation}" + (f" beta={cfg.beta}" if cfg.mitigation == "clr" else "")
        + (f" warmup={cfg.warmup_epochs}" if cfg.mitigation == "warmup" else ""),
        f"final gamma     {analysis.count_convolutions(g)}",
        f"first update    epoch {first}" + (" (never)" if first > cfg.epochs else ""),
        f"final val acc   {result.log.records[-1]['val_acc']:.4f}",
        f"wall clock      {wall:.1f} s",
        "",
    ]
    for key, entries in g.cells.items():
        lines.append(f"{key}:")
        for n, (op, src) in enumerate(entries):
            lines.append(f"  node {2 + n // 2} <- {op}({src})")
    return "\n".join(lines) + "\n"


def cmd_search(args):
    cfg = resolve_config(args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    cfg_path = os.path.join(out, "config.json")
    if args.resume and os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            if json.load(fh) != cfg.to_dict():
                raise ConfigError("resumed run must use the configuration in config.json", "resume")
    _write(cfg_path, json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def progress(rec, timing):
        if not args.quiet:
            print(f"epoch {rec['epoch']:3d}  train {rec['train_loss']:.4f}/{rec['train_acc']:.3f}  "
                  f"val {rec['val_loss']:.4f}/{rec['val_acc']:.3f}  lr_arch {rec['lr_arch']:.2e}  "
                  f"gamma {rec['gamma']:2d}  {timing['step_seconds']:.3f} s/step", flush=True)

    t0 = time.perf_counter()
    result = search.run_search(cfg, out_dir=out, resume=args.resume, progress=progress)
    wall = time.perf_counter() - t0
    _write(os.path.join(out, "genotype.json"), analysis.genotype_to_json(result.genotype))
    report = analysis.collapse_report(result.log.records)
    _write(os.path.join(out, "collapse_report.csv"), report.to_csv())
    text = _summary_text(cfg, result, wall)
    _write(os.path.join(out, "summary.txt"), text)
    if result.events:
        _write(os.path.join(out, "events.log"), "\n".join(result.events) + "\n")
    print(text, end="")
    return 0


# -- derive / analyze ----------------------------------------------------------------


def cmd_derive(args):
    expected = make_catalog(args.include_skip) if args.catalog_check else None
    alpha = search.read_alpha(args.alpha, expected)
    data = analysis.genotype_to_json(analysis.derive_genotype(alpha))
    if args.out:
        _write(args.out, data)
    else:
        sys.stdout.write(data.decode())
    return 0


def _parse_edge(text):
    key, _, idx = text.partition(":")
    try:
        return key, int(idx)
    except ValueError:
        raise ConfigError(f"expected KIND:INDEX, got {text!r}", "edge") from None


def cmd_analyze(args):
    if not os.path.exists(args.metrics):
        raise DataFormatError(f"{args.metrics} not found")
    log = search.MetricsLog.read(args.metrics)
    if not log.records:
        raise DataFormatError(f"{args.metrics} holds no records")
    os.makedirs(args.out, exist_ok=True)
    report = analysis.collapse_report(log.records)
    _write(os.path.join(args.out, "collapse_report.csv"), report.to_csv())
    _write(os.path.join(args.out, "gamma.csv"),
           "epoch,gamma\n" + "".join(f"{t},{g}\n" for t, g in zip(report.epochs, report.gamma)))
    first = analysis.detect_first_update_epoch(log.trajectory(), args.eps)
    lines = [f"epochs {len(log.records)}", f"first update epoch {first} (eps {args.eps:g})",
             f"gamma curve {' '.join(map(str, report.gamma))}"]
    if args.edge:
        key, idx = _parse_edge(args.edge)
        rec0 = log.records[0]
        if key not in rec0["alpha_softmax"] or not 0 <= idx < len(rec0["alpha_softmax"][key]):
            raise ConfigError(f"no edge {args.edge} in this log", "edge")
        traj = analysis.trajectory_csv(log.records, key, idx, rec0["catalog"])
        _write(os.path.join(args.out, f"trajectory_{key}_e{idx}.csv"), traj)
        edge_first = analysis.detect_first_update_epoch(analysis.alpha_trajectory(log.records, key, idx), args.eps)
        lines.append(f"first update epoch on {args.edge}: {edge_first}")
    text = "\n".join(lines) + "\n"
    _write(os.path.join(args.out, "analysis.txt"), text)
    print(text, end="")
    return 0


# -- bench --------------------------------------------------------------------------


def _bench_net(net, batch, hw, steps, warmup, rng):
    dtype = net.classifier.weight.dtype
    x = Tensor(rng.standard_normal((batch, 3, hw, hw)).astype(dtype))
    y = rng.integers(0, net.config.num_classes, size=batch)
    params = net.parameters() + net.arch_parameters()
    times = []
    for i in range(warmup + steps):
        t0 = time.perf_counter()
        loss = F.cross_entropy(net(x), y)
        backward(loss)
        elapsed = time.perf_counter() - t0
        for p in params:
            p.grad = None
        if i >= warmup:
            times.append(elapsed)
    return times


def bench_presets(c0=16, batch=32, hw=32, steps=50, warmup=3, dtype="float32", ops=7, seed=0):
    """Single-step forward+backward timing and footprint for broad-3 vs deep-8 supernets."""
    catalog = make_catalog(ops == 8)
    dt = np.dtype(dtype).type
    nets = {
        "broad-3cell": build_broad(BroadConfig(2, 0, 1, c0, 10), "search", catalog=catalog, seed=seed, dtype=dt),
        "deep-8cell": build_deep(DeepConfig(8, None, c0, 10), "search", catalog=catalog, seed=seed, dtype=dt),
    }
    rows = {}
    for name, net in nets.items():
        net.set_mask_rng(np.random.default_rng(seed))
        times = _bench_net(net, batch, hw, steps, warmup, np.random.default_rng(seed))
        rows[name] = {
            "cells": len(net.cells),
            "params": count_params(net),
            "footprint": activation_footprint(net, batch, hw),
            "mean_s": statistics.fmean(times),
            "std_s": statistics.stdev(times) if len(times) > 1 else 0.0,
            "steps": len(times),
        }
    return rows


def format_bench(rows):
    lines = [f"{'preset':<12} {'cells':>5} {'params':>9} {'footprint':>12} {'step mean (s)':>14} {'sigma':>8}"]
    for name, r in rows.items():
        lines.append(f"{name:<12} {r['cells']:>5} {r['params']:>9} {r['footprint']:>12} "
                     f"{r['mean_s']:>14.4f} {r['std_s']:>8.4f}")
    b, d = rows["broad-3cell"], rows["deep-8cell"]
    lines.append(f"ratio deep/broad: step time {d['mean_s'] / b['mean_s']:.2f}x, "
                 f"footprint {d['footprint'] / b['footprint']:.2f}x")
    return "\n".join(lines) + "\n"


def cmd_bench(args):
    if args.backend:
        kernels.set_backend(args.backend)
    if args.steps < 2:
        raise ConfigError("need at least 2 timed steps", "steps")
    rows = bench_presets(args.init_channels, args.batch_size, args.image_size, args.steps, args.warmup,
                         args.dtype, args.ops, args.seed)
    text = f"backend {kernels.backend()}  dtype {args.dtype}  batch {args.batch_size}  " \
           f"input {args.image_size}x{args.image_size}  C0 {args.init_channels}\n" + format_bench(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "bench.txt"), text)
        _write(os.path.join(args.out, "bench.json"), json.dumps(rows, indent=2) + "\n")
    print(text, end="")
    return 0


# -- eval ---------------------------------------------------------------------------


def _eval_data(args):
    kind, directory = parse_source(args.data)
    if kind == "synthetic":
        full = synthetic(SyntheticSpec(args.synthetic_samples, args.synthetic_classes, args.image_size,
                                       args.noise, args.data_seed))
        return split_half(full, args.data_seed)
    if not os.path.isdir(directory):
        raise DataFormatError(f"CIFAR-10 directory {directory!r} not found")
    train, test = load_cifar10_bin(directory)
    if test is None:
        raise DataFormatError(f"{directory}: test_batch.bin is missing")
    return train, test


def _accuracy(net, data, batch_size):
    correct = 0
    with no_grad():
        for idx in batch_indices(len(data), batch_size):
            logits = net(Tensor(data.images[idx].astype(net.classifier.weight.dtype)))
            correct += int(np.sum(np.argmax(logits.data, axis=1) == data.labels[idx]))
    return correct / len(data)


def cmd_eval(args):
    try:
        with open(args.genotype, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read {args.genotype}: {exc}") from None
    genotype = analysis.genotype_from_json(raw, make_catalog(args.include_skip))
    if args.epochs < 1 or args.batch_size < 1:
        raise ConfigError("epochs and batch size must be >= 1", "epochs")
    train, test = _eval_data(args)
    dt = np.dtype(args.dtype).type
    if args.topology == "broad":
        net = build_broad(BroadConfig(args.u, args.k, args.v, args.init_channels, train.num_classes),
                          "eval", genotype=genotype, seed=args.seed, dtype=dt)
    else:
        net = build_deep(DeepConfig(args.n_cells, None, args.init_channels, train.num_classes),
                         "eval", genotype=genotype, seed=args.seed, dtype=dt)
    rng = np.random.default_rng(args.seed)
    w = net.parameters()
    sgd = SgdState.create(w, 0.9, 3e-4)
    for t in range(1, args.epochs + 1):
        lr = cosine_lr(t, args.epochs, args.lr)
        for idx in batch_indices(len(train), args.batch_size, rng):
            x = augment(train.images[idx], rng).astype(dt)
            loss = F.cross_entropy(net(Tensor(x)), train.labels[idx])
            backward(loss)
            clip_grad_norm(w, 5.0)
            sgd_step(w, None, lr, sgd)
            for p in w:
                p.grad = None
        print(f"epoch {t:3d}  lr {lr:.4f}  last loss {float(loss.data):.4f}", flush=True)
    acc = _accuracy(net, test, args.batch_size)
    text = f"test accuracy {acc:.4f} ({len(test)} samples, {count_params(net)} params)\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "eval.json"),
               json.dumps({"test_accuracy": acc, "samples": len(test), "params": count_params(net)}, indent=2) + "\n")
    print(text, end="")
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="bdarts", description="Broad differentiable architecture search")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run an architecture search")
    s.add_argument("--preset", default="bdarts-desk", choices=sorted(search.PRESETS))
    s.add_argument("--config", help="resolved config.json from an earlier run (overrides --preset)")
    s.add_argument("--order", type=int, choices=(1, 2))
    s.add_argument("--mitigation", choices=search.MITIGATIONS)
    s.add_argument("--beta", type=float)
    s.add_argument("--warmup-epochs", type=int)
    s.add_argument("--clr-per-step", action="store_true", help="advance the CLR epoch counter per step")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--include-skip", action="store_true")
    s.add_argument("--partial-channels", type=int, metavar="K")
    s.add_argument("--data", help="synthetic | cifar10:<dir>")
    s.add_argument("--lr", type=float)
    s.add_argument("--lr-arch", type=float)
    s.add_argument("--xi", type=float)
    s.add_argument("--init-channels", type=int)
    s.add_argument("--dtype", choices=("float32", "float64"))
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--quiet", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search)

    d = sub.add_parser("derive", help="discretize an alpha checkpoint into genotype.json")
    d.add_argument("alpha", help="alpha.json or a search output directory")
    d.add_argument("--out")
    d.add_argument("--include-skip", action="store_true")
    d.add_argument("--catalog-check", action="store_true", help="reject alpha from a different catalog")
    d.set_defaults(func=cmd_derive)

    a = sub.add_parser("analyze", help="collapse report and first-update epoch from metrics.jsonl")
    a.add_argument("metrics")
    a.add_argument("--out", required=True)
    a.add_argument("--eps", type=float, default=1e-4)
    a.add_argument("--edge", help="KIND:INDEX to export a trajectory, e.g. convolution:0")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", help="broad-3cell vs deep-8cell step time and footprint")
    b.add_argument("--init-channels", type=int, default=16)
    b.add_argument("--batch-size", type=int, default=32)
    b.add_argument("--image-size", type=int, default=32)
    b.add_argument("--steps", type=int, default=50)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    b.add_argument("--ops", type=int, choices=(7, 8), default=7)
    b.add_argument("--backend", choices=("cython", "numpy"))
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("eval", help="train a derived architecture and report test accuracy")
    e.add_argument("--genotype", required=True)
    e.add_argument("--topology", choices=("broad", "deep"), default="broad")
    e.add_argument("--u", type=int, default=2)
    e.add_argument("--k", type=int, default=0)
    e.add_argument("--v", type=int, default=1)
    e.add_argument("--n-cells", type=int, default=8)
    e.add_argument("--init-channels", type=int, default=8)
    e.add_argument("--include-skip", action="store_true")
    e.add_argument("--data", default="synthetic")
    e.add_argument("--synthetic-samples", type=int, default=512)
    e.add_argument("--synthetic-classes", type=int, default=4)
    e.add_argument("--image-size", type=int, default=16)
    e.add_argument("--noise", type=float, default=0.5)
    e.add_argument("--data-seed", type=int, default=0)
    e.add_argument("--epochs", type=int, default=10)
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--lr", type=float, default=0.025)
    e.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BdartsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code if not isinstance(exc, UsageError) else 2


if __name__ == "__main__":
    sys.exit(main())
