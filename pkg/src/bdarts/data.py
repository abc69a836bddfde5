"""Datasets: CIFAR-10 binary batches, a synthetic texture task, splits and batching."""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .engine.tensor import dump_blob, load_blob
from .errors import DataFormatError, UsageError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
# per-channel statistics of the CIFAR-10 training set, pixels scaled to [0, 1]
CIFAR_NORM = {
    "version": "cifar10-norm-v1",
    "mean": (0.4914, 0.4822, 0.4465),
    "std": (0.2470, 0.2435, 0.2616),
}


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, H, W] float64, normalized
    labels: np.ndarray  # [N] int64
    num_classes: int
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataFormatError(f"images must be [N,3,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) < 1:
            raise DataFormatError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.mean, self.std, self.name)


# -- CIFAR-10 binary -------------------------------------------------------------


def read_cifar10_file(path):
    """Raw records of one batch file: (uint8 images [N,3,32,32], labels [N])."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise DataFormatError(f"{path}: empty file")
    n, rem = divmod(len(raw), CIFAR_RECORD)
    if rem:
        raise DataFormatError(f"{path}: truncated record at byte offset {n * CIFAR_RECORD} "
                              f"({rem} of {CIFAR_RECORD} bytes)")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(f"{path}: label {labels[bad[0]]} > 9 at byte offset {bad[0] * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(n, 3, 32, 32).copy()
    return images, labels


def write_cifar10_file(path, images, labels):
    """Inverse of ``read_cifar10_file``."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels)
    if images.shape[1:] != (3, 32, 32) or len(images) != len(labels):
        raise UsageError(f"expected [N,3,32,32] images and N labels, got {images.shape}, {labels.shape}")
    rec = np.empty((len(labels), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images.reshape(len(labels), -1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def normalize_cifar(images_u8):
    mean = np.asarray(CIFAR_NORM["mean"]).reshape(1, 3, 1, 1)
    std = np.asarray(CIFAR_NORM["std"]).reshape(1, 3, 1, 1)
    return (images_u8.astype(np.float64) / 255.0 - mean) / std


def load_cifar10_bin(directory, files=None):
    """Load the five training batches and the test batch from ``directory``.

    Returns ``(train, test)``; ``files`` may narrow the training files read.
    """
    def load(names, tag):
        imgs, labs = [], []
        for name in names:
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise DataFormatError(f"missing CIFAR-10 file {path}")
            i, lab = read_cifar10_file(path)
            imgs.append(i)
            labs.append(lab)
        return Dataset(normalize_cifar(np.concatenate(imgs)), np.concatenate(labs), 10,
                       CIFAR_NORM["mean"], CIFAR_NORM["std"], f"cifar10-{tag}")

    train = load(files or CIFAR_TRAIN_FILES, "train")
    test = load([CIFAR_TEST_FILE], "test") if os.path.exists(os.path.join(directory, CIFAR_TEST_FILE)) else None
    return train, test


# -- synthetic textures -----------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Class-keyed sinusoidal textures with random colour and phase.

    Class c fixes the stripe orientation (vertical or horizontal, so a
    horizontal flip keeps the class) and the spatial frequency. Colour is
    drawn per sample, so it carries no label information.
    """

    n_samples: int = 512
    num_classes: int = 4
    image_size: int = 16
    noise: float = 0.5
    seed: int = 0
    phases: int = 4
    pattern: str = "texture"

    def class_params(self, c):
        # (orientation, cycles across the image)
        return c % 2, 1 + c // 2


def synthetic(spec):
    if spec.n_samples < 1 or spec.num_classes < 2 or spec.image_size < 4:
        raise UsageError("synthetic spec needs n_samples >= 1, num_classes >= 2, image_size >= 4")
    if spec.pattern != "texture":
        raise UsageError(f"unknown synthetic pattern {spec.pattern!r}")
    max_cycles = spec.class_params(spec.num_classes - 1)[1]
    if 2 * max_cycles > spec.image_size // 2:
        raise UsageError(f"{spec.num_classes} classes need images wider than {spec.image_size}")
    rng = np.random.default_rng(spec.seed)
    n, s = spec.n_samples, spec.image_size
    labels = np.arange(n) % spec.num_classes
    rng.shuffle(labels)
    coords = np.arange(s) / s
    phase = 2 * np.pi * rng.integers(0, spec.phases, size=n) / spec.phases
    colour = rng.uniform(0.3, 1.0, size=(n, 3)) * rng.choice([-1.0, 1.0], size=(n, 3))
    images = np.empty((n, 3, s, s))
    for i in range(n):
        orient, cycles = spec.class_params(labels[i])
        wave = np.sin(2 * np.pi * cycles * coords + phase[i])
        plane = np.broadcast_to(wave[None, :], (s, s)) if orient == 0 else np.broadcast_to(wave[:, None], (s, s))
        images[i] = colour[i][:, None, None] * plane
    images += spec.noise * rng.standard_normal(images.shape)
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(images, labels.astype(np.int64), spec.num_classes,
                   tuple(float(v) for v in mean), tuple(float(v) for v in std), "synthetic")


# -- splitting, batching, augmentation ------------------------------------------


def split_half(dataset, seed):
    """Stratified half split: sizes ceil(N/2) and floor(N/2), each class within +-1."""
    n = len(dataset)
    if n < 2:
        raise UsageError("need at least two samples to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    # group by class keeping the random order inside each class, then deal alternately
    order = perm[np.argsort(dataset.labels[perm], kind="stable")]
    first, second = np.sort(order[0::2]), np.sort(order[1::2])
    return dataset.subset(first), dataset.subset(second)


def batch_indices(n, batch_size, rng=None):
    """One epoch of index batches; shuffled when ``rng`` is given, last short batch kept."""
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(dataset, batch_size, shuffle_seed=None):
    rng = None if shuffle_seed is None else np.random.default_rng(shuffle_seed)
    for idx in batch_indices(len(dataset), batch_size, rng):
        yield dataset.images[idx], dataset.labels[idx]


def hflip(images):
    return images[..., ::-1].copy()


def augment(images, rng, pad=4, flip=True):
    """Random crop from a zero-padded copy plus random horizontal flip."""
    b, c, h, w = images.shape
    out = images
    if pad:
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, size=b)
        dx = rng.integers(0, 2 * pad + 1, size=b)
        out = np.empty_like(images)
        for i in range(b):
            out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    if flip:
        mask = rng.random(b) < 0.5
        if mask.any():
            out = out.copy() if out is images else out
            out[mask] = out[mask][..., ::-1]
    return out


# -- blob dump / load ----------------------------------------------------------------


def dump_dataset(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    dump_blob(dataset.images, os.path.join(directory, "images.f64"))
    dump_blob(dataset.labels.astype(np.float64), os.path.join(directory, "labels.f64"))
    meta = {"num_classes": dataset.num_classes, "mean": list(dataset.mean),
            "std": list(dataset.std), "name": dataset.name}
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def load_dataset(directory):
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    images = load_blob(os.path.join(directory, "images.f64"))
    labels = load_blob(os.path.join(directory, "labels.f64"))
    if np.any(labels != np.round(labels)):
        raise DataFormatError("labels blob holds non-integer values")
    return Dataset(images, labels.astype(np.int64), int(meta["num_classes"]),
                   tuple(meta["mean"]), tuple(meta["std"]), meta.get("name", ""))


def parse_source(spec):
    """``synthetic`` or ``cifar10:<dir>`` -> (kind, directory)."""
    if spec == "synthetic":
        return "synthetic", None
    if spec.startswith("cifar10:") and len(spec) > len("cifar10:"):
        return "cifar10", spec[len("cifar10:"):]
    raise UsageError(f"unknown data source {spec!r}; use synthetic or cifar10:<dir>")
