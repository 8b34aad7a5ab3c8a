"""Datasets: CIFAR binary batches and a synthetic shifted-pattern task."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR10_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST = ("test_batch.bin",)
RECORD = 1 + 3 * 32 * 32
DATA_DIR_ENV = "EFCN_DATA_DIR"


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    classes: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def batch(self, idx):
        return self.images[idx], self.labels[idx]

    def subset(self, n, seed):
        """Seeded subsample of at most ``n`` examples (all of them if smaller)."""
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), n, replace=False))
        return Dataset(self.images[idx], self.labels[idx], self.split, self.classes)


def default_data_dir():
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def read_cifar_batch(path, label_bytes=1, classes=10):
    """Parse one binary batch: label byte(s) then 3x1024 R, G, B plane bytes."""
    raw = Path(path).read_bytes()
    rec = label_bytes + 3 * 1024
    if len(raw) == 0 or len(raw) % rec:
        whole = len(raw) // rec * rec
        raise DataFormatError(f"{path}: truncated record at byte offset {whole} "
                              f"(file has {len(raw)} bytes, records are {rec} bytes)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(f"{path}: label {labels[i]} out of range at byte offset "
                              f"{i * rec + label_bytes - 1}")
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory=None):
    """Train and test splits, scaled to [0, 1] and centred per channel.

    Channel means come from the training split and are subtracted from both.
    """
    directory = Path(directory) if directory is not None else default_data_dir()
    parts = {}
    for split, names in (("train", CIFAR10_TRAIN), ("test", CIFAR10_TEST)):
        xs, ys = [], []
        for name in names:
            p = directory / name
            if not p.exists():
                raise FileNotFoundError(f"missing CIFAR-10 batch file {p}")
            x, y = read_cifar_batch(p)
            xs.append(x)
            ys.append(y)
        parts[split] = (np.concatenate(xs), np.concatenate(ys))
    mean = parts["train"][0].mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    return tuple(Dataset(x - mean[None, :, None, None], y, split, 10)
                 for split, (x, y) in parts.items())


@dataclass(frozen=True)
class SyntheticConfig:
    classes: int = 10
    canvas: int = 16
    pattern: int = 7
    channels: int = 3
    n_train: int = 5000
    n_test: int = 1000
    noise: float = 0.3
    standardize: bool = True


def class_patterns(cfg, seed):
    """One fixed pattern per class with entries in {-1, 0, +1}, about half zero."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    q = cfg.pattern
    shape = (cfg.classes, cfg.channels, q, q)
    signs = rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=shape)
    keep = rng.random(shape) < 0.5
    return (signs * keep).astype(np.float32)


def _draw(cfg, patterns, n, rng):
    labels = np.arange(n) % cfg.classes
    rng.shuffle(labels)
    span = cfg.canvas - cfg.pattern + 1
    offsets = rng.integers(0, span, size=(n, 2))
    images = np.zeros((n, cfg.channels, cfg.canvas, cfg.canvas), dtype=np.float32)
    q = cfg.pattern
    for i in range(n):
        r, c = offsets[i]
        images[i, :, r:r + q, c:c + q] = patterns[labels[i]]
    if cfg.noise > 0:
        images += rng.normal(0.0, cfg.noise, size=images.shape).astype(np.float32)
    return images, labels


def gen_synthetic(cfg=None, seed=0):
    """Class patterns pasted at random offsets on a blank canvas, plus noise.

    Labels are balanced (every class appears ``n // classes`` times, the
    remainder going to the lowest classes).  Train and test come from
    separate generator streams.  With ``standardize`` both splits are
    shifted and scaled by the training split's per-channel statistics.
    """
    cfg = cfg or SyntheticConfig()
    if not 1 <= cfg.pattern <= cfg.canvas:
        raise ValueError(f"pattern side {cfg.pattern} must lie in [1, {cfg.canvas}]")
    if cfg.classes < 2 or cfg.n_train < 1 or cfg.n_test < 1 or cfg.channels < 1 or cfg.noise < 0:
        raise ValueError(f"invalid synthetic config {cfg}")
    patterns = class_patterns(cfg, seed)
    parts = []
    for stream, n in enumerate((cfg.n_train, cfg.n_test), start=1):
        rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))
        parts.append(_draw(cfg, patterns, n, rng))
    if cfg.standardize:
        mean, std = channel_stats(parts[0][0])
        parts = [((x - mean) / std, y) for x, y in parts]
    return tuple(Dataset(x.astype(np.float32), y, split, cfg.classes)
                 for split, (x, y) in zip(("train", "test"), parts))


def channel_stats(images):
    """Per-channel mean and standard deviation, shaped to broadcast over NCHW."""
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std > 0, std, 1.0)
    return (mean[None, :, None, None].astype(np.float32),
            std[None, :, None, None].astype(np.float32))


def template_classify(images, patterns):
    """Nearest template over all placements (an oracle for noiseless data)."""
    n = len(images)
    c, q = patterns.shape[0], patterns.shape[-1]
    d = images.shape[-1]
    best = np.full(n, np.inf)
    pred = np.zeros(n, dtype=np.int64)
    for r in range(d - q + 1):
        for s in range(d - q + 1):
            canvas = np.zeros((c,) + images.shape[1:], dtype=np.float32)
            canvas[:, :, r:r + q, s:s + q] = patterns
            dist = ((images[:, None] - canvas[None]) ** 2).sum(axis=(2, 3, 4))
            k = dist.argmin(axis=1)
            dk = dist[np.arange(n), k]
            better = dk < best
            best[better] = dk[better]
            pred[better] = k[better]
    return pred
