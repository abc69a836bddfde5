import numpy as np
import pytest

import oracles
from bdarts.data import (CIFAR_RECORD, Dataset, SyntheticSpec, augment, batch_indices, batches,
                         dump_dataset, hflip, load_cifar10_bin, load_dataset, normalize_cifar,
                         parse_source, read_cifar10_file, split_half, synthetic, write_cifar10_file)
from bdarts.errors import DataFormatError, UsageError


def _fixture_bytes():
    """Two handcrafted records: label, then R, G, B planes row-major."""
    out = bytearray()
    for label, base in ((3, 0), (9, 100)):
        out.append(label)
        for ch in range(3):
            for r in range(32):
                for c in range(32):
                    out.append((base + 50 * ch + r + 2 * c) % 256)
    return bytes(out)


def test_cifar_fixture_pixel_placement(tmp_path):
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(_fixture_bytes())
    images, labels = read_cifar10_file(path)
    assert labels.tolist() == [3, 9]
    for n, base in enumerate((0, 100)):
        for ch in range(3):
            for r in (0, 7, 31):
                for c in (0, 13, 31):
                    assert images[n, ch, r, c] == (base + 50 * ch + r + 2 * c) % 256


def test_cifar_round_trip_bit_exact(tmp_path):
    src = tmp_path / "a.bin"
    src.write_bytes(_fixture_bytes())
    images, labels = read_cifar10_file(src)
    write_cifar10_file(tmp_path / "b.bin", images, labels)
    assert (tmp_path / "b.bin").read_bytes() == _fixture_bytes()


def test_cifar_errors(tmp_path):
    empty = tmp_path / "e.bin"
    empty.write_bytes(b"")
    with pytest.raises(DataFormatError):
        read_cifar10_file(empty)
    trunc = tmp_path / "t.bin"
    trunc.write_bytes(_fixture_bytes()[:-5])
    with pytest.raises(DataFormatError, match=f"offset {CIFAR_RECORD}"):
        read_cifar10_file(trunc)
    bad = bytearray(_fixture_bytes())
    bad[CIFAR_RECORD] = 10
    (tmp_path / "l.bin").write_bytes(bytes(bad))
    with pytest.raises(DataFormatError, match=f"label 10 > 9 at byte offset {CIFAR_RECORD}"):
        read_cifar10_file(tmp_path / "l.bin")


def test_cifar_directory_load(tmp_path):
    for i in range(1, 6):
        (tmp_path / f"data_batch_{i}.bin").write_bytes(_fixture_bytes())
    (tmp_path / "test_batch.bin").write_bytes(_fixture_bytes())
    train, test = load_cifar10_bin(tmp_path)
    assert len(train) == 10 and len(test) == 2
    raw, _ = read_cifar10_file(tmp_path / "test_batch.bin")
    np.testing.assert_array_equal(test.images, normalize_cifar(raw))


def test_cifar_missing_file(tmp_path):
    with pytest.raises(DataFormatError):
        load_cifar10_bin(tmp_path)


def test_dataset_invariants():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 3, 4, 4)), np.array([0, 2]), 2)
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((0, 3, 4, 4)), np.zeros(0, int), 2)


def test_synthetic_normalized_and_balanced():
    d = synthetic(SyntheticSpec(n_samples=64, num_classes=4))
    np.testing.assert_allclose(d.images.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(d.images.std(axis=(0, 2, 3)), 1, atol=1e-12)
    assert np.bincount(d.labels).tolist() == [16] * 4


def test_synthetic_separable_at_noise_zero():
    d = synthetic(SyntheticSpec(n_samples=200, num_classes=2, noise=0.0, seed=3))
    x = d.images.reshape(len(d), -1)
    pred = oracles.knn_predict(x[:150], d.labels[:150], x[150:], k=3)
    assert np.array_equal(pred, d.labels[150:])


def test_synthetic_deterministic():
    a = synthetic(SyntheticSpec(n_samples=32, seed=5))
    b = synthetic(SyntheticSpec(n_samples=32, seed=5))
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def test_synthetic_rejects_too_small_images():
    with pytest.raises(UsageError):
        synthetic(SyntheticSpec(num_classes=10, image_size=8))


@pytest.mark.parametrize("n", [2, 7, 50])
def test_split_half_partition(n):
    d = synthetic(SyntheticSpec(n_samples=n if n >= 4 else 4, num_classes=2))
    a, b = split_half(d, seed=1)
    total = len(d)
    assert (len(a), len(b)) == ((total + 1) // 2, total // 2)
    ca, cb = np.bincount(a.labels, minlength=2), np.bincount(b.labels, minlength=2)
    assert np.all(np.abs(ca - cb) <= 1)
    rows = {r.tobytes() for r in d.images}
    assert {r.tobytes() for r in a.images} | {r.tobytes() for r in b.images} == rows
    assert not {r.tobytes() for r in a.images} & {r.tobytes() for r in b.images}
    a2, _ = split_half(d, seed=1)
    assert np.array_equal(a.images, a2.images)


def test_batches_cover_epoch():
    d = synthetic(SyntheticSpec(n_samples=10, num_classes=2))
    assert [len(y) for _, y in batches(d, 4)] == [4, 4, 2]
    idx = np.concatenate(batch_indices(10, 4, np.random.default_rng(0)))
    assert sorted(idx.tolist()) == list(range(10))
    with pytest.raises(UsageError):
        batch_indices(10, 0)


def test_shuffle_deterministic():
    d = synthetic(SyntheticSpec(n_samples=16, num_classes=2))
    a = [y.tolist() for _, y in batches(d, 4, shuffle_seed=9)]
    b = [y.tolist() for _, y in batches(d, 4, shuffle_seed=9)]
    assert a == b


def test_hflip_involution():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 6))
    assert np.array_equal(hflip(hflip(x)), x)


def test_augment_deterministic_and_shape_preserving():
    x = np.random.default_rng(0).standard_normal((4, 3, 8, 8))
    a = augment(x, np.random.default_rng(1))
    b = augment(x, np.random.default_rng(1))
    assert a.shape == x.shape and np.array_equal(a, b)
    assert np.array_equal(augment(x, np.random.default_rng(1), pad=0, flip=False), x)


def test_dump_load_round_trip(tmp_path):
    d = synthetic(SyntheticSpec(n_samples=12, num_classes=3, seed=2))
    dump_dataset(d, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert np.array_equal(back.images, d.images) and np.array_equal(back.labels, d.labels)
    assert back.num_classes == 3 and back.mean == d.mean


def test_parse_source():
    assert parse_source("synthetic") == ("synthetic", None)
    assert parse_source("cifar10:/data/c10") == ("cifar10", "/data/c10")
    with pytest.raises(UsageError):
        parse_source("imagenet:/x")
