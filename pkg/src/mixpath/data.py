"""Datasets: the seeded synthetic image generator and a CIFAR-10 binary reader."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .space import substream

CIFAR_RECORD_BYTES = 3073


def synthetic_images(n: int, seed: int, size: int = 8, channels: int = 3,
                     num_classes: int = 4, noise: float = 0.6):
    """Gaussian blobs textured by a class-specific spatial frequency.

    Each image carries one blob at a random position and width, modulated by
    a grating whose frequency band and orientation depend on the class. White
    noise on top keeps the task from being trivially separable, and the blob
    colour is random so channels do not leak the label.

    Returns ``(x, y)`` with ``x`` float32 NCHW and ``y`` int64.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = substream(seed, "synthetic")
    y = rng.integers(0, num_classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # classes alternate orientation and walk up through frequency bands
    base_freq = np.linspace(0.08, 0.38, (num_classes + 1) // 2)
    x = np.empty((n, channels, size, size), dtype=np.float32)
    for i in range(n):
        c = int(y[i])
        freq = base_freq[c // 2] * rng.uniform(0.9, 1.1)
        theta = (np.pi / 2) * (c % 2) + rng.normal(0.0, 0.15)
        phase = rng.uniform(0, 2 * np.pi)
        cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
        width = rng.uniform(0.25 * size, 0.5 * size)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        u = np.cos(theta) * xx + np.sin(theta) * yy
        grating = np.cos(2 * np.pi * freq * u + phase)
        colour = rng.uniform(0.5, 1.5, size=channels)
        img = colour[:, None, None] * (blob * grating)[None]
        img += noise * rng.standard_normal((channels, size, size))
        x[i] = img
    return x, y.astype(np.int64)


def make_splits(seed: int, n_train: int, n_val: int, size: int = 8, channels: int = 3,
                num_classes: int = 4, noise: float = 0.6) -> dict:
    """Disjoint train / validation sets drawn from one seeded stream."""
    x, y = synthetic_images(n_train + n_val, seed, size, channels, num_classes, noise)
    return {"x_train": x[:n_train], "y_train": y[:n_train],
            "x_val": x[n_train:], "y_val": y[n_train:]}


def save_dataset(path, splits: dict) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **splits)


def load_dataset(path) -> dict:
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def read_cifar10_bin(path, limit: int | None = None):
    """Read one CIFAR-10 binary batch file.

    Each record is one label byte followed by 3072 bytes of 32x32 RGB pixels,
    channel-major. Pixels are scaled to [0, 1].
    """
    raw = np.fromfile(Path(path), dtype=np.uint8)
    if raw.size % CIFAR_RECORD_BYTES:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}")
    rec = raw.reshape(-1, CIFAR_RECORD_BYTES)
    if limit is not None:
        rec = rec[:limit]
    y = rec[:, 0].astype(np.int64)
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return x, y
