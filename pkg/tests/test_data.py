import numpy as np
import pytest

from parsec.data import (
    CIFAR_FILE_BYTES,
    CIFAR_MEAN,
    CIFAR_STD,
    DataError,
    DatasetHandle,
    SyntheticSpec,
    augment_batch,
    cycle_batches,
    epoch_batches,
    gen_synthetic,
    load_cifar10,
    read_cifar10_file,
    split_data,
    write_cifar10_file,
    write_synthetic_cifar10,
)


def fake_file(path, seed=0):
    rng = np.random.default_rng(seed)
    pix = rng.integers(0, 256, (10_000, 3, 32, 32), dtype=np.uint8)
    labels = rng.integers(0, 10, 10_000)
    write_cifar10_file(path, pix, labels)
    return pix, labels


def test_cifar_record_layout(tmp_path):
    pix, labels = fake_file(tmp_path / "b.bin")
    raw = (tmp_path / "b.bin").read_bytes()
    assert len(raw) == CIFAR_FILE_BYTES == 30_730_000
    # record 1: label byte then R plane, G plane, B plane, row-major
    rec = raw[3073 : 2 * 3073]
    assert rec[0] == labels[1]
    assert rec[1] == pix[1, 0, 0, 0] and rec[2] == pix[1, 0, 0, 1]
    assert rec[1 + 32] == pix[1, 0, 1, 0]
    assert rec[1 + 1024] == pix[1, 1, 0, 0]
    got_pix, got_labels = read_cifar10_file(tmp_path / "b.bin")
    assert got_pix.shape == (10_000, 3, 32, 32)
    assert np.array_equal(got_pix, pix) and np.array_equal(got_labels, labels)


def test_truncated_file_names_file(tmp_path):
    fake_file(tmp_path / "b.bin")
    data = (tmp_path / "b.bin").read_bytes()
    (tmp_path / "b.bin").write_bytes(data[:-5])
    with pytest.raises(DataError, match="b.bin"):
        read_cifar10_file(tmp_path / "b.bin")


def test_bad_label_reports_record(tmp_path):
    fake_file(tmp_path / "b.bin")
    data = bytearray((tmp_path / "b.bin").read_bytes())
    data[3073 * 17] = 12
    (tmp_path / "b.bin").write_bytes(bytes(data))
    with pytest.raises(DataError, match="record 17"):
        read_cifar10_file(tmp_path / "b.bin")


@pytest.fixture(scope="module")
def cifar_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cifar")
    write_synthetic_cifar10(d, seed=0, records_per_file=10_000)
    return d


def test_load_cifar_normalisation(cifar_dir):
    test = load_cifar10(cifar_dir, "test")
    assert len(test) == 10_000 and test.kind == "cifar10-binary"
    raw, _ = read_cifar10_file(cifar_dir / "test_batch.bin")
    expect = (raw[0, 1, 2, 3] / 255.0 - CIFAR_MEAN[1]) / CIFAR_STD[1]
    assert test.images[0, 1, 2, 3] == pytest.approx(expect, rel=1e-12)


def test_subset_is_deterministic(cifar_dir):
    a = load_cifar10(cifar_dir, "train", subset=2000, seed=3)
    b = load_cifar10(cifar_dir, "train", subset=2000, seed=3)
    c = load_cifar10(cifar_dir, "train", subset=2000, seed=4)
    assert len(a) == 2000
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.labels, c.labels)


def test_missing_files(tmp_path):
    with pytest.raises(DataError, match="missing"):
        load_cifar10(tmp_path, "train")


def test_synthetic_determinism_and_balance():
    spec = SyntheticSpec(n=300, num_classes=3, shape=(4,))
    a, b = gen_synthetic(spec, 1), gen_synthetic(spec, 1)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [100, 100, 100]
    with pytest.raises(DataError):
        gen_synthetic(SyntheticSpec(num_classes=1), 0)


def nearest_mean_accuracy(train, test):
    means = np.stack([train.images[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    d = ((test.images[:, None] - means[None]) ** 2).reshape(len(test), train.num_classes, -1).sum(-1)
    return float((d.argmin(1) == test.labels).mean())


def test_separation_controls_accuracy():
    def acc(sep):
        spec = SyntheticSpec(n=2000, num_classes=4, shape=(16,), separation=sep)
        return nearest_mean_accuracy(gen_synthetic(spec, 1, pattern_seed=0), gen_synthetic(spec, 2, pattern_seed=0))

    assert abs(acc(0.0) - 0.25) < 0.05
    assert acc(3.0) > 0.95


def test_texture_pattern_shape():
    d = gen_synthetic(SyntheticSpec(n=20, pattern="texture", shape=(3, 8, 8)), 0)
    assert d.images.shape == (20, 3, 8, 8)
    with pytest.raises(DataError):
        gen_synthetic(SyntheticSpec(n=20, pattern="texture", shape=(8,)), 0)


def test_split_data():
    d = DatasetHandle("synthetic", np.arange(50_000.0)[:, None], np.zeros(50_000, dtype=np.int64), 2)
    tr, se = split_data(d, 0.5, seed=0)
    assert len(tr) == len(se) == 25_000
    a, b = set(tr.images[:, 0]), set(se.images[:, 0])
    assert not a & b and len(a | b) == 50_000
    tr2, _ = split_data(d, 0.5, seed=0)
    assert np.array_equal(tr.images, tr2.images)
    small = d.take(np.arange(3))
    with pytest.raises(DataError, match="empty"):
        split_data(small, 0.1, seed=0)
    with pytest.raises(DataError):
        split_data(d, 1.0, seed=0)


def test_batching():
    d = DatasetHandle("synthetic", np.arange(10.0)[:, None], np.zeros(10, dtype=np.int64), 2)
    batches = list(epoch_batches(d, 3, np.random.default_rng(0)))
    assert len(batches) == 3
    seen = np.concatenate([b[0][:, 0] for b in batches])
    assert len(set(seen)) == 9
    it = cycle_batches(d, 4, np.random.default_rng(0))
    assert all(next(it)[0].shape == (4, 1) for _ in range(7))
    with pytest.raises(DataError):
        next(cycle_batches(d, 11, np.random.default_rng(0)))


def test_augment_flip_and_crop():
    x = np.arange(2 * 1 * 4 * 4, dtype=float).reshape(2, 1, 4, 4)
    out = augment_batch(x, np.random.default_rng(0), pad=0)
    for i in range(2):
        assert np.array_equal(out[i], x[i]) or np.array_equal(out[i], x[i, :, :, ::-1])
    out = augment_batch(x, np.random.default_rng(1), pad=2)
    assert out.shape == x.shape
