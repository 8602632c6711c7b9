"""Synthetic radiograph stand-ins for smoke tests and demos.

Each class is a distinct texture (stripes, checkerboard, rings) with random
phase, period and noise, so the task is learnable but not trivial to memorize
pixel by pixel.
"""
from pathlib import Path

import numpy as np
from PIL import Image

PATTERNS = ("horizontal", "vertical", "checker", "rings")


def pattern_image(kind, size, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = rng.uniform(6.0, 10.0)
    phase = rng.uniform(0, 2 * np.pi)
    if kind == "horizontal":
        img = np.sin(2 * np.pi * yy / period + phase)
    elif kind == "vertical":
        img = np.sin(2 * np.pi * xx / period + phase)
    elif kind == "checker":
        img = np.sin(2 * np.pi * xx / period + phase) * np.sin(2 * np.pi * yy / period + phase)
    elif kind == "rings":
        cy, cx = rng.uniform(0.3, 0.7, size=2) * size
        img = np.sin(2 * np.pi * np.hypot(yy - cy, xx - cx) / period + phase)
    else:
        raise ValueError(f"unknown pattern {kind!r}")
    return 0.5 + 0.4 * img + rng.normal(0, 0.05, img.shape)


def make_pattern_dataset(n_per_class, size=64, num_classes=4, seed=0):
    """Return ``(images, labels)``: 2-D grids and integer labels, class-interleaved."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(n_per_class):
        for c in range(num_classes):
            images.append(pattern_image(PATTERNS[c], size, rng))
            labels.append(c)
    return images, np.array(labels)


def write_pattern_tree(root, class_names, n_per_class, size=64, seed=0):
    """Write PNGs as ``root/<class>/<k>.png``; returns the root path."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for c, name in enumerate(class_names):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for k in range(n_per_class):
            img = np.clip(pattern_image(PATTERNS[c % len(PATTERNS)], size, rng), 0, 1)
            Image.fromarray((img * 255).astype(np.uint8)).save(d / f"img{k:04d}.png")
    return root
