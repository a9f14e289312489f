"""Datasets: deterministic synthetic blob images and CIFAR-10 binary batches."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_BATCH = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

DATA_ENV = "REPARAMQUANT_DATA"


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return int(max(self.y_train.max(initial=0), self.y_test.max(initial=0))) + 1


def iterate_batches(
    x: np.ndarray,
    y: np.ndarray,
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Mini-batches in order, or shuffled by ``rng``. The last partial batch is kept."""
    order = np.arange(len(x)) if rng is None else rng.permutation(len(x))
    for start in range(0, len(x), batch_size):
        idx = order[start : start + batch_size]
        yield x[idx], y[idx]


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticParams:
    classes: int = 10
    samples: int = 3000
    image_size: int = 16
    channels: int = 3
    noise: float = 1.0
    blobs: int = 3
    jitter: int = 1
    margin: float = 0.5
    seed: int = 0


def _blob_template(rng: np.random.Generator, p: SyntheticParams) -> np.ndarray:
    size = p.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((p.channels, size, size))
    for _ in range(p.blobs):
        cy, cx = rng.uniform(2, size - 2, size=2)
        sigma = rng.uniform(1.0, 3.0)
        amp = rng.normal(0.0, 1.0, size=p.channels)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        img += amp[:, None, None] * bump[None]
    return img / np.sqrt(np.mean(img**2))


def class_templates(p: SyntheticParams) -> np.ndarray:
    """Unit-RMS class templates, pairwise RMS distance at least ``p.margin``."""
    if p.classes < 2:
        raise ValueError("synthetic data needs at least two classes")
    rng = np.random.default_rng(p.seed)
    templates: list[np.ndarray] = []
    attempts = 0
    while len(templates) < p.classes:
        t = _blob_template(rng, p)
        attempts += 1
        if all(np.sqrt(np.mean((t - u) ** 2)) >= p.margin for u in templates):
            templates.append(t)
        elif attempts > 1000 * p.classes:
            raise ValueError(f"could not place {p.classes} templates at margin {p.margin}")
    return np.stack(templates)


def make_synthetic(params: SyntheticParams = SyntheticParams()) -> Dataset:
    """Balanced class-conditional blob images with shift jitter and Gaussian noise.

    The first 80% of a seeded permutation is the training split; channels
    are standardized with that split's mean and std.
    """
    p = params
    templates = class_templates(p)
    rng = np.random.default_rng(p.seed + 1)
    labels = np.arange(p.samples) % p.classes
    rng.shuffle(labels)
    x = templates[labels].copy()
    if p.jitter:
        shifts = rng.integers(-p.jitter, p.jitter + 1, size=(p.samples, 2))
        for i, (dy, dx) in enumerate(shifts):
            x[i] = np.roll(x[i], (int(dy), int(dx)), axis=(1, 2))
    x += p.noise * rng.normal(size=x.shape)
    n_train = int(round(0.8 * p.samples))
    # per-channel standardization with training-split statistics
    mean = x[:n_train].mean(axis=(0, 2, 3), keepdims=True)
    std = x[:n_train].std(axis=(0, 2, 3), keepdims=True)
    x = ((x - mean) / std).astype(np.float32)
    meta = {"kind": "synthetic", **{k: getattr(p, k) for k in p.__dataclass_fields__}}
    return Dataset(x[:n_train], labels[:n_train].astype(np.int64), x[n_train:], labels[n_train:].astype(np.int64), meta)


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------

class DatasetError(ValueError):
    pass


def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch into uint8 images ``[N, 3, 32, 32]`` and labels."""
    raw = Path(path).read_bytes()
    expected = CIFAR_RECORD * CIFAR_RECORDS_PER_BATCH
    if len(raw) != expected:
        whole = len(raw) // CIFAR_RECORD
        raise DatasetError(
            f"{path}: {len(raw)} bytes, expected {expected}; "
            f"record {whole} is incomplete at byte offset {whole * CIFAR_RECORD}"
            if len(raw) < expected
            else f"{path}: {len(raw)} bytes, expected {expected}; trailing data at byte offset {expected}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(CIFAR_RECORDS_PER_BATCH, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"{path}: label {labels[i]} in record {i} (byte offset {i * CIFAR_RECORD})")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def normalize_images(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    x = images.astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (x - m) / s


def data_root(path=None) -> Path:
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    if path is None:
        raise DatasetError(f"no dataset path given and {DATA_ENV} is unset")
    return Path(path)


def load_cifar10(
    path=None,
    mean: Sequence[float] = CIFAR_MEAN,
    std: Sequence[float] = CIFAR_STD,
    train_limit: Optional[int] = None,
    test_limit: Optional[int] = None,
) -> Dataset:
    """Load the five training batches and the test batch from a directory."""
    root = data_root(path)
    xs, ys = [], []
    for name in CIFAR_TRAIN_FILES:
        f = root / name
        if not f.exists():
            raise DatasetError(f"missing CIFAR-10 batch {f}")
        x, y = read_cifar10_batch(f)
        xs.append(x)
        ys.append(y)
    x_train, y_train = np.concatenate(xs), np.concatenate(ys)
    if not (root / CIFAR_TEST_FILE).exists():
        raise DatasetError(f"missing CIFAR-10 batch {root / CIFAR_TEST_FILE}")
    x_test, y_test = read_cifar10_batch(root / CIFAR_TEST_FILE)
    if train_limit is not None:
        x_train, y_train = x_train[:train_limit], y_train[:train_limit]
    if test_limit is not None:
        x_test, y_test = x_test[:test_limit], y_test[:test_limit]
    meta = {"kind": "cifar10" if train_limit is None else "cifar10_subset", "path": str(root)}
    return Dataset(normalize_images(x_train, mean, std), y_train, normalize_images(x_test, mean, std), y_test, meta)
