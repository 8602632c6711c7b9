"""Layer heatmaps and the circle-annotation agreement check."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from .errors import InputError
from .fusion import HEATMAP_LAYERS, as_nchw
from .preprocess import bilinear_resize

DETECTION_THRESHOLD = 0.5
OVERLAY_ALPHA = 0.5


@dataclass
class HeatmapStack:
    maps: dict[str, np.ndarray]
    image_id: str = ""

    def __getitem__(self, name):
        return self.maps[name]

    def __len__(self):
        return len(self.maps)


@dataclass(frozen=True)
class CircleAnnotation:
    cx: float
    cy: float
    r: float
    label: str = ""
    image_id: str = ""

    def __post_init__(self):
        if not self.r > 0:
            raise InputError(f"circle radius must be positive, got {self.r}")


def reduce_activation(act: np.ndarray) -> np.ndarray:
    """Channel-mean of |activation| (CHW -> HW), min-max scaled to [0, 1]."""
    m = np.abs(np.asarray(act, dtype=np.float64)).mean(axis=0)
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def extract_heatmaps(model, image, layers=None, image_id="") -> HeatmapStack:
    """Named-layer heatmaps for one preprocessed HWC image, each at input size."""
    layers = list(HEATMAP_LAYERS if layers is None else layers)
    unknown = [name for name in layers if name not in HEATMAP_LAYERS]
    if unknown:
        raise InputError(f"unknown layer(s) {unknown}; valid names: {', '.join(HEATMAP_LAYERS)}")
    x = as_nchw(np.asarray(image)[None], model)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            feats = model.forward_features(x)
    finally:
        model.train(was_training)
    size = model.input_size
    maps = {}
    for name in layers:
        reduced = reduce_activation(feats[name][0].cpu().numpy())
        # bilinear interpolation of [0,1] values stays in [0,1]; clip guards rounding
        maps[name] = np.clip(bilinear_resize(reduced, size), 0.0, 1.0)
    return HeatmapStack(maps, image_id)


def circle_mask(shape, annotation: CircleAnnotation) -> np.ndarray:
    """Pixels whose centers satisfy ``(x - cx)^2 + (y - cy)^2 <= r^2`` (x = column)."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    return (xx - annotation.cx) ** 2 + (yy - annotation.cy) ** 2 <= annotation.r**2


def circle_check(heatmap, annotation: CircleAnnotation, threshold=DETECTION_THRESHOLD) -> dict:
    """Mean heatmap value inside the circle; detected when strictly above ``threshold``."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    mask = circle_mask(heatmap.shape, annotation)
    if not mask.any():
        raise InputError(
            f"circle ({annotation.cx}, {annotation.cy}, r={annotation.r}) lies outside the {heatmap.shape} map"
        )
    mean_inside = float(heatmap[mask].mean())
    return {"detected": mean_inside > threshold, "mean_inside": mean_inside}


def load_annotations(path) -> dict[str, list[CircleAnnotation]]:
    """Read ``[{image_id, cx, cy, r, label}, ...]`` grouped by image id."""
    try:
        records = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"annotation file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    grouped = {}
    for rec in records:
        try:
            ann = CircleAnnotation(float(rec["cx"]), float(rec["cy"]), float(rec["r"]),
                                   str(rec.get("label", "")), str(rec["image_id"]))
        except KeyError as exc:
            raise InputError(f"{path}: annotation missing field {exc}") from None
        grouped.setdefault(ann.image_id, []).append(ann)
    return grouped


def overlay_rgb(image, heatmap, cmap="jet") -> np.ndarray:
    """Blend a grayscale image with a color-mapped heatmap at alpha 0.5.

    The color layer is weighted by the heatmap value, so a zero map leaves
    the grayscale image at half intensity.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=2)
    heatmap = np.clip(np.asarray(heatmap, dtype=np.float64), 0, 1)
    if heatmap.shape != image.shape:
        heatmap = bilinear_resize(heatmap, *image.shape)
    lo, hi = image.min(), image.max()
    gray = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
    color = colormaps[cmap](heatmap)[..., :3] * heatmap[..., None]
    blend = (1 - OVERLAY_ALPHA) * gray[..., None] + OVERLAY_ALPHA * color
    return np.round(blend * 255).astype(np.uint8)


def render_overlay(image, heatmap, path, cmap="jet") -> Path:
    path = Path(path)
    rgb = overlay_rgb(image, heatmap, cmap)
    try:
        # fixed encoder settings keep the bytes reproducible
        Image.fromarray(rgb, "RGB").save(path, format="PNG", optimize=False, compress_level=6)
    except OSError as exc:
        raise OSError(f"cannot write overlay {path}: {exc}") from exc
    return path
