"""Datasets: CIFAR-10 binary batches, a synthetic image generator, splits and batching."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

CIFAR_RECORD = 3073
CIFAR_RECORDS_PER_FILE = 10_000
CIFAR_FILE_BYTES = CIFAR_RECORD * CIFAR_RECORDS_PER_FILE
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_MEAN = np.array([0.49139968, 0.48215827, 0.44653124])
CIFAR_STD = np.array([0.24703233, 0.24348505, 0.26158768])


class DataError(ValueError):
    pass


@dataclass
class DatasetHandle:
    kind: str
    images: np.ndarray  # (n, C, H, W) float64, normalised
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def take(self, idx) -> "DatasetHandle":
        return DatasetHandle(self.kind, self.images[idx], self.labels[idx], self.num_classes)

    def subset(self, n: int, seed: int) -> "DatasetHandle":
        """Deterministic seeded subsample of `n` examples (order preserved)."""
        if n >= len(self):
            return self
        rng = np.random.default_rng(seed)
        return self.take(np.sort(rng.choice(len(self), size=n, replace=False)))


def read_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (n, 3, 32, 32) and labels from one binary batch file."""
    path = Path(path)
    size = path.stat().st_size
    if size != CIFAR_FILE_BYTES:
        raise DataError(f"{path}: expected {CIFAR_FILE_BYTES} bytes, found {size}")
    raw = np.fromfile(path, dtype=np.uint8).reshape(CIFAR_RECORDS_PER_FILE, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"{path}: label byte {labels[bad[0]]} > 9 at record {bad[0]}")
    return raw[:, 1:].reshape(-1, 3, 32, 32), labels


def write_cifar10_file(path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images (n, 3, 32, 32) in the CIFAR-10 binary record layout."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), 3072)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    rec.tofile(path)


def normalize_cifar(raw: np.ndarray) -> np.ndarray:
    x = raw.astype(np.float64) / 255.0
    return (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]


def load_cifar10(directory, split: str = "train", subset: int | None = None, seed: int = 0) -> DatasetHandle:
    directory = Path(directory)
    files = CIFAR_TRAIN_FILES if split == "train" else (CIFAR_TEST_FILE,)
    missing = [f for f in files if not (directory / f).is_file()]
    if missing:
        raise DataError(f"{directory}: missing CIFAR-10 files {missing}")
    parts = [read_cifar10_file(directory / f) for f in files]
    raw = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if subset is not None and subset < len(labels):
        idx = np.sort(np.random.default_rng(seed).choice(len(labels), size=subset, replace=False))
        raw, labels = raw[idx], labels[idx]
    return DatasetHandle("cifar10-binary", normalize_cifar(raw), labels, 10)


def cifar10_dir_from_env() -> Path | None:
    d = os.environ.get("PARSEC_CIFAR10_DIR")
    return Path(d) if d else None


# synthetic ------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n: int = 2000
    num_classes: int = 10
    shape: tuple = (3, 32, 32)
    separation: float = 1.0
    noise: float = 1.0
    pattern: str = "template"  # or "texture"


def _class_templates(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """One smooth random template per class, unit RMS."""
    shape = tuple(spec.shape)
    pats = rng.normal(size=(spec.num_classes,) + shape)
    if len(shape) == 3 and shape[1] > 1 and shape[2] > 1:
        k = np.ones(3) / 3
        for ax in (2, 3):
            pats = np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), ax, pats)
    axes = tuple(range(1, pats.ndim))
    pats /= np.sqrt((pats**2).mean(axis=axes, keepdims=True))
    return pats


def _textures(spec: SyntheticSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Oriented gratings, orientation set by class, random phase per example (RMS 1)."""
    if len(spec.shape) != 3:
        raise DataError("texture pattern needs a (C, H, W) shape")
    C, H, W = spec.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    theta = np.pi * labels / spec.num_classes
    phase = rng.uniform(0, 2 * np.pi, size=len(labels))
    freq = 0.18
    arg = 2 * np.pi * freq * (xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None])
    g = np.sqrt(2) * np.cos(arg + phase[:, None, None])
    return np.repeat(g[:, None], C, axis=1)


def gen_synthetic(spec: SyntheticSpec, seed: int, pattern_seed: int | None = None) -> DatasetHandle:
    """Class-conditional data: x = separation * signal(y) + noise * N(0, I).

    With pattern "template" the signal is a fixed per-class Gaussian template
    (templates drawn from `pattern_seed`, default `seed`, so train and test
    draws can share them). With "texture" it is an oriented grating with a
    random phase, which a linear model on pixels cannot separate. Classes are
    balanced; with separation 0 labels carry no information.
    """
    if spec.num_classes < 2:
        raise DataError("synthetic data needs at least 2 classes")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(spec.n) % spec.num_classes).astype(np.int64)
    if spec.pattern == "template":
        pats = _class_templates(spec, np.random.default_rng(seed if pattern_seed is None else pattern_seed))
        signal = pats[labels]
    elif spec.pattern == "texture":
        signal = _textures(spec, labels, rng)
    else:
        raise DataError(f"unknown synthetic pattern {spec.pattern!r}")
    x = spec.separation * signal + spec.noise * rng.normal(size=(spec.n,) + tuple(spec.shape))
    return DatasetHandle("synthetic", x, labels, spec.num_classes)


def write_synthetic_cifar10(directory, seed: int = 0, separation: float = 1.0, pattern: str = "texture",
                            records_per_file: int = CIFAR_RECORDS_PER_FILE):
    """Write the six CIFAR-10 batch files with synthetic 8-bit images.

    A stand-in when the real dataset is unavailable; it exercises the exact
    binary layout and the full loading path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec(n=records_per_file, num_classes=10, shape=(3, 32, 32),
                         separation=separation, pattern=pattern)
    for i, name in enumerate(CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,)):
        d = gen_synthetic(spec, seed=seed * 100 + i + 1, pattern_seed=seed)
        pix = np.clip(np.round(127.5 + 40.0 * d.images), 0, 255).astype(np.uint8)
        write_cifar10_file(directory / name, pix, d.labels)


# splitting / batching -------------------------------------------------------

def split_data(data: DatasetHandle, fraction: float, seed: int) -> tuple[DatasetHandle, DatasetHandle]:
    """(train, search) split; `fraction` of the examples go to the search set."""
    if not 0 < fraction < 1:
        raise DataError(f"split fraction must be in (0, 1), got {fraction}")
    n = len(data)
    n_search = int(round(n * fraction))
    if n_search == 0 or n_search == n:
        raise DataError(f"split of {n} examples at fraction {fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return data.take(np.sort(perm[n_search:])), data.take(np.sort(perm[:n_search]))


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and zero-pad random crop."""
    n, C, H, W = x.shape
    out = np.empty_like(x)
    flips = rng.random(n) < 0.5
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    for i in range(n):
        img = xp[i, :, offs[i, 0] : offs[i, 0] + H, offs[i, 1] : offs[i, 1] + W]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out


def epoch_batches(data: DatasetHandle, batch_size: int, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled full batches; the remainder is dropped."""
    perm = rng.permutation(len(data))
    for s in range(len(data) // batch_size):
        idx = perm[s * batch_size : (s + 1) * batch_size]
        yield data.images[idx], data.labels[idx]


def cycle_batches(data: DatasetHandle, batch_size: int, rng: np.random.Generator):
    if batch_size > len(data):
        raise DataError(f"batch size {batch_size} exceeds the {len(data)} available examples")
    while True:
        yield from epoch_batches(data, batch_size, rng)
