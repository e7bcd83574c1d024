"""Synthetic classification data: Gaussian blob patterns plus pixel noise.

Each class owns a blob center spaced evenly on a circle around the image
midpoint; a sample is the class pattern plus i.i.d. Gaussian pixel noise.
The generator is fully determined by (classes, samples, image size, noise
sigma, seed), which is what makes paired training runs reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class Dataset:
    images: np.ndarray  # (S, H, W, 1) float64
    labels: np.ndarray  # (S,) int64

    def __len__(self) -> int:
        return len(self.labels)


def class_pattern(label: int, classes: int, image_size: int) -> np.ndarray:
    """Deterministic blob image for one class, peak value 1."""
    angle = 2.0 * np.pi * label / classes
    radius = image_size / 4.0
    cy = image_size / 2.0 + radius * np.sin(angle)
    cx = image_size / 2.0 + radius * np.cos(angle)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    spread = image_size / 6.0
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return np.exp(-d2 / (2.0 * spread ** 2))


def make_blobs(classes: int, samples: int, image_size: int,
               noise_sigma: float, seed: int) -> Dataset:
    """Balanced sample set with shuffled order, reproducible from the seed."""
    if classes < 2:
        raise ConfigError("need at least 2 classes")
    if samples < classes:
        raise ConfigError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    labels = np.arange(samples, dtype=np.int64) % classes
    rng.shuffle(labels)
    patterns = np.stack([class_pattern(k, classes, image_size)
                         for k in range(classes)])
    images = patterns[labels] + rng.normal(0.0, noise_sigma,
                                           size=(samples, image_size, image_size))
    return Dataset(images[..., None], labels)


def split(data: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic train/validation split."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_val = max(1, int(round(len(data) * val_fraction)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    return (Dataset(data.images[train_idx], data.labels[train_idx]),
            Dataset(data.images[val_idx], data.labels[val_idx]))
