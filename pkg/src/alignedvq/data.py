"""Deterministic synthetic classification data.

Each class is a fixed analytic template (an oriented bar plus a blob whose
position is keyed to the class index) with Gaussian pixel noise on top, so no
asset files are needed and regeneration from a seed is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DataConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 10
    samples_per_class: int = 200
    image_size: int = 32
    channels: int = 1
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataConfigError("need at least two classes")
        if self.noise_sigma < 0:
            raise DataConfigError("noise sigma must be non-negative")
        if self.samples_per_class < 1:
            raise DataConfigError("need at least one sample per class")


def class_template(label: int, cfg: DataConfig) -> np.ndarray:
    """Analytic template for a class: a bar through the center at an angle
    keyed to the label, plus a Gaussian blob on a circle."""
    size = cfg.image_size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = cy = (size - 1) / 2.0
    theta = np.pi * label / cfg.num_classes
    # signed distance from the bar's axis
    dist = np.abs((xs - cx) * np.sin(theta) - (ys - cy) * np.cos(theta))
    bar = (dist < size / 10.0).astype(np.float64)
    phi = 2.0 * np.pi * label / cfg.num_classes
    bx = cx + 0.33 * size * np.cos(phi)
    by = cy + 0.33 * size * np.sin(phi)
    blob = np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / (2.0 * (size / 12.0) ** 2))
    img = np.clip(0.7 * bar + 0.9 * blob, 0.0, 1.0)
    return np.repeat(img[:, :, None], cfg.channels, axis=2).astype(np.float32)


@dataclass
class SyntheticDataset:
    """Class-balanced images with a stratified 90/10 train/val split."""

    config: DataConfig
    images: np.ndarray   # [M, H, W, ch] float32
    labels: np.ndarray   # [M] int64
    train_idx: np.ndarray = field(repr=False, default=None)
    val_idx: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return self.images.shape[0]

    @property
    def train(self):
        return self.images[self.train_idx], self.labels[self.train_idx]

    @property
    def val(self):
        return self.images[self.val_idx], self.labels[self.val_idx]


def generate(cfg: DataConfig) -> SyntheticDataset:
    rng = np.random.default_rng(cfg.seed)
    templates = [class_template(c, cfg) for c in range(cfg.num_classes)]
    per = cfg.samples_per_class
    total = cfg.num_classes * per
    images = np.empty((total, cfg.image_size, cfg.image_size, cfg.channels), dtype=np.float32)
    labels = np.empty(total, dtype=np.int64)
    for c in range(cfg.num_classes):
        noise = rng.normal(scale=cfg.noise_sigma,
                           size=(per, cfg.image_size, cfg.image_size, cfg.channels))
        images[c * per:(c + 1) * per] = templates[c][None] + noise.astype(np.float32)
        labels[c * per:(c + 1) * per] = c
    if not np.all(np.isfinite(images)):
        raise DataConfigError("non-finite pixels generated")
    # stratified split keeps label marginals exactly uniform in both halves
    val_per = max(1, per // 10)
    train_idx, val_idx = [], []
    for c in range(cfg.num_classes):
        order = rng.permutation(per) + c * per
        val_idx.append(order[:val_per])
        train_idx.append(order[val_per:])
    return SyntheticDataset(cfg, images, labels,
                            np.concatenate(train_idx), np.concatenate(val_idx))
