"""Synthetic desk corpus: smooth oriented gratings with a soft blob.

The class of an image is the orientation band of its grating, so a good
representation has to encode global structure rather than colour.
"""

from __future__ import annotations

import numpy as np

from deskmae import rng as rngs
from deskmae.data import PackedDataset


def grating(size: int, label: int, n_classes: int, rng: np.random.Generator, noise: float = 0.02) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    band = np.pi / n_classes
    theta = band * label + rng.uniform(-0.3, 0.3) * band
    freq = rng.uniform(0.6, 1.2)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    base = rng.uniform(0.35, 0.65, size=3)
    # every channel carries the grating at a visible contrast
    tint = rng.uniform(0.15, 0.25, size=3) * rng.choice([-1.0, 1.0], size=3)
    img = base + wave[..., None] * tint
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rng.uniform(0.05, 0.15) ** 2))
    img = img + blob[..., None] * rng.uniform(-0.2, 0.2, size=3)
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def make_corpus(count: int, size: int = 32, n_classes: int = 2, seed: int = 0, noise: float = 0.02) -> PackedDataset:
    labels = np.arange(count) % n_classes
    pixels = np.stack([grating(size, int(y), n_classes, rngs.stream(seed, "synth", i), noise)
                       for i, y in enumerate(labels)]) if count else np.zeros((0, size, size, 3), np.uint8)
    return PackedDataset(size, size, 3, n_classes, labels, pixels)
