"""Datasets: an in-repo synthetic task and the CIFAR-10 binary format.

The synthetic task is two-class 16x16 single-channel images carrying the
class at two very different signal scales: a bright Gaussian blob whose
location usually gives the class away, and a faint pixel-scale stripe
pattern whose sign always does. A fraction of samples hide the blob at an
uninformative center position, so top accuracy requires detecting the faint
cue too. Feature magnitudes then span a wide range, which is exactly the
regime where coarse shared quantization scales lose information.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .seeding import substream

__all__ = ["Dataset", "synthetic_blobs", "load_cifar10_binary", "CIFAR_RECORD_BYTES"]

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images/labels shape mismatch")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def _blob(size: int, cy: float, cx: float, sy: float, sx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2) / 2.0)


def synthetic_blobs(
    n: int,
    seed: int,
    size: int = 16,
    noise: float = 0.15,
    stripe_amp: float = 0.02,
) -> Dataset:
    """Seeded two-class images whose cues live at three signal scales.

    35% of samples carry the class in the blob position (coarse; survives
    clipped, heavily quantized responses), 35% in a blob amplitude threshold
    at the uninformative center (needs the top of the response range
    resolved, so clipping costs accuracy), and 30% only in the sign of a
    very faint stripe texture (tiny responses near the bottom of the range).
    The stripe pattern also rides on every sample consistently with its
    class. Structured noise is smooth (random low-frequency fields), which
    stripe-matched high-pass filters cancel. No single shared quantization
    step can resolve the amplitude threshold without flushing the stripe
    responses to zero; one step per column serves both.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = substream(seed, "data")
    labels = rng.integers(0, 2, size=n)
    images = np.zeros((n, 1, size, size), dtype=np.float64)
    corners = {0: (size * 0.30, size * 0.30), 1: (size * 0.68, size * 0.68)}
    center = (size * 0.49, size * 0.49)
    yy, xx = np.mgrid[0:size, 0:size]
    stripes = np.where(xx % 2 == 0, 1.0, -1.0)
    for i in range(n):
        label = int(labels[i])
        kind = rng.uniform()
        if kind < 0.35:  # position sample
            cy, cx = corners[label]
            amp = rng.uniform(0.60, 0.95)
        elif kind < 0.70:  # amplitude-threshold sample
            cy, cx = center
            amp = rng.uniform(0.79, 0.95) if label else rng.uniform(0.50, 0.66)
        else:  # texture-only sample: amplitude straddles the threshold band
            cy, cx = center
            amp = rng.uniform(0.68, 0.77)
        cy += rng.uniform(-1.2, 1.2)
        cx += rng.uniform(-1.2, 1.2)
        sy = rng.uniform(1.7, 2.5)
        sx = rng.uniform(1.7, 2.5)
        img = 0.16 + amp * _blob(size, cy, cx, sy, sx)
        img += (stripe_amp if label else -stripe_amp) * stripes
        # structured noise: smooth random fields only (no pixel speckle)
        for _ in range(2):
            fy, fx = rng.uniform(0.5, 2.0, size=2)
            phase = rng.uniform(0, 2 * np.pi, size=2)
            img += (noise * 0.5) * np.cos(
                2 * np.pi * (fy * yy / size) + phase[0]
            ) * np.cos(2 * np.pi * (fx * xx / size) + phase[1])
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images=images, labels=labels.astype(np.int64))


def load_cifar10_binary(
    path: str, classes: tuple[int, ...] | None = None, limit: int | None = None
) -> Dataset:
    """Read CIFAR-10 binary-version records (1 label byte + 3072 pixel bytes).

    Pixels are row-major RGB planes, scaled per channel to [0, 1]. A file
    whose size is not a whole number of records is rejected, naming the
    offset where the truncated record starts.
    """
    file_size = os.path.getsize(path)
    if file_size == 0 or file_size % CIFAR_RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: truncated CIFAR-10 binary file; size {file_size} is not a "
            f"multiple of {CIFAR_RECORD_BYTES}; last whole record ends at byte "
            f"{(file_size // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES}"
        )
    n_records = file_size // CIFAR_RECORD_BYTES
    raw = np.fromfile(path, dtype=np.uint8).reshape(n_records, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(n_records, 3, 32, 32).astype(np.float64) / 255.0
    if classes is not None:
        keep = np.isin(labels, np.asarray(classes, dtype=np.int64))
        images, labels = images[keep], labels[keep]
        # relabel to 0..len(classes)-1 in the given order
        remap = {int(c): i for i, c in enumerate(classes)}
        labels = np.array([remap[int(v)] for v in labels], dtype=np.int64)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images=images, labels=labels)
