"""Image conditioning: denoising, normalization, resizing and augmentation.

All functions work on 2-D float arrays (a single grayscale radiograph)
unless stated otherwise. Randomness only enters through an explicit
``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConfigError, InputError, NumericError

BINOMIAL_3x3 = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0
DENOISE_METHODS = ("binomial_deconv", "landweber", "curvature_anisotropic_diffusion")
# ITU-R BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


def _check_grid(pixels) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2 or pixels.size == 0:
        raise InputError(f"expected a nonempty 2-D grid, got shape {pixels.shape}")
    if not np.isfinite(pixels).all():
        raise InputError("image contains non-finite values")
    return pixels


def load_image(path) -> np.ndarray:
    """Read an 8/16-bit grayscale or RGB PNG/JPEG as a float luminance grid."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode in ("RGB", "RGBA", "P", "CMYK", "LA"):
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) @ _LUMA
            else:
                arr = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from None
    if arr.ndim == 3:
        arr = arr[..., 0]
    return _check_grid(arr)


# --------------------------------------------------------------- denoising


def _blur(x, kernel):
    return ndimage.convolve(x, kernel, mode="reflect")


def binomial_deconvolution(pixels, iterations=3, kernel=BINOMIAL_3x3):
    """Richardson-Lucy deconvolution under a binomial blur model.

    The multiplicative update needs positive data, so the grid is shifted
    to a strictly positive range and shifted back afterwards.
    """
    b = _check_grid(pixels)
    offset = b.min() - 1.0
    b = b - offset
    x = b.copy()
    flipped = kernel[::-1, ::-1]
    for _ in range(iterations):
        ratio = b / np.maximum(_blur(x, kernel), 1e-12)
        x = x * _blur(ratio, flipped)
    return x + offset


def landweber(pixels, tau=1.0, iterations=10, operator="binomial", kernel=BINOMIAL_3x3):
    """Landweber iteration ``x <- x + tau * A^T (b - A x)`` started from zero.

    Stopping after a few iterations acts as the regularizer. ``operator`` is
    ``"binomial"`` (blur by ``kernel``) or ``"identity"``.
    """
    b = _check_grid(pixels)
    if operator == "identity":
        apply, adjoint, norm_sq = (lambda v: v), (lambda v: v), 1.0
    elif operator == "binomial":
        flipped = kernel[::-1, ::-1]
        apply = lambda v: _blur(v, kernel)  # noqa: E731
        adjoint = lambda v: _blur(v, flipped)  # noqa: E731
        # nonnegative normalized kernel: operator norm <= l1 norm
        norm_sq = float(np.abs(kernel).sum()) ** 2
    else:
        raise ConfigError(f"unknown Landweber operator {operator!r}")
    if not 0 < tau < 2.0 / norm_sq:
        raise NumericError(f"Landweber step tau={tau} outside the stable range (0, {2.0 / norm_sq:g})")
    x = np.zeros_like(b)
    scale = np.abs(b).max() + 1.0
    for k in range(iterations):
        x = x + tau * adjoint(b - apply(x))
        if not np.isfinite(x).all() or np.abs(x).max() > 1e6 * scale:
            raise NumericError(f"Landweber iteration diverged at step {k} (tau={tau})")
    return x


def curvature_anisotropic_diffusion(pixels, iterations=5, time_step=0.0625, conductance=3.0):
    """Modified curvature diffusion: ``I_t = |grad I| div(c(|grad I|) grad I / |grad I|)``.

    ``c(s) = exp(-(s / (K * g_mean))**2)`` where ``g_mean`` is the mean
    gradient magnitude of the input, making the conductance ``K`` scale-free.
    """
    x = _check_grid(pixels).copy()
    if x.shape[0] < 2 or x.shape[1] < 2:
        return x
    gy, gx = np.gradient(x)
    g_mean = np.sqrt(gx**2 + gy**2).mean()
    if g_mean == 0:
        return x
    k = conductance * g_mean
    eps = 1e-12 * g_mean
    for _ in range(iterations):
        gy, gx = np.gradient(x)
        mag = np.sqrt(gx**2 + gy**2)
        c = np.exp(-((mag / k) ** 2)) / np.maximum(mag, eps)
        div = np.gradient(c * gx, axis=1) + np.gradient(c * gy, axis=0)
        x = x + time_step * mag * div
    return x


def denoise(pixels, method: str, **params) -> np.ndarray:
    if method == "binomial_deconv":
        return binomial_deconvolution(pixels, **params)
    if method == "landweber":
        return landweber(pixels, **params)
    if method == "curvature_anisotropic_diffusion":
        return curvature_anisotropic_diffusion(pixels, **params)
    raise ConfigError(f"unknown denoising method {method!r}; choose from {DENOISE_METHODS}")


# ------------------------------------------------------ normalize / resize


def normalize(pixels) -> np.ndarray:
    """Zero mean, unit (population) standard deviation; blank images map to zeros."""
    x = _check_grid(pixels)
    sd = x.std()
    if sd < 1e-12:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def bilinear_resize(grid, height, width=None) -> np.ndarray:
    """Bilinear resample with half-pixel centers; exact identity for equal sizes."""
    grid = np.asarray(grid, dtype=np.float64)
    width = height if width is None else width
    if grid.ndim != 2 or grid.size == 0:
        raise InputError(f"cannot resize grid of shape {grid.shape}")
    h, w = grid.shape
    if (h, w) == (height, width):
        return grid.copy()

    def coords(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(h, height)
    x0, x1, fx = coords(w, width)
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bottom = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def resize_to_input(pixels, size: int = 224) -> np.ndarray:
    """Resample to ``(size, size)`` and replicate into three channels (HWC)."""
    grid = np.asarray(pixels, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise InputError(f"cannot resize grid of shape {grid.shape}")
    out = bilinear_resize(grid, size)
    return np.repeat(out[:, :, None], 3, axis=2)


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_degrees: float = 15.0
    width_shift_px: int = 20
    height_shift_px: int = 20
    zca_whitening: bool = False
    zca_epsilon: float = 1e-6

    def __post_init__(self):
        if self.rotation_degrees < 0 or self.width_shift_px < 0 or self.height_shift_px < 0:
            raise ConfigError("augmentation ranges must be nonnegative")
        if self.zca_epsilon <= 0:
            raise ConfigError("zca_epsilon must be positive")

    @classmethod
    def identity(cls):
        return cls(0.0, 0, 0, False)

    def to_dict(self):
        return asdict(self)


def rotate(image, degrees) -> np.ndarray:
    """Rotate about the image center (bilinear, zero fill). Works on HW or HWC."""
    if degrees == 0:
        return np.array(image, dtype=np.float64)
    return ndimage.rotate(image, degrees, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)


def shift(image, dx: int, dy: int) -> np.ndarray:
    """Integer translation with zero fill; positive dx moves content right."""
    image = np.asarray(image, dtype=np.float64)
    out = np.zeros_like(image)
    h, w = image.shape[:2]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = image[src_y, src_x]
    return out


def augment(image, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Random rotation then random integer shift of one image (HW or HWC).

    ZCA whitening needs batch statistics; see :func:`augment_batch`.
    """
    out = np.array(image, dtype=np.float64)
    if spec.rotation_degrees > 0:
        out = rotate(out, rng.uniform(-spec.rotation_degrees, spec.rotation_degrees))
    dx = int(rng.integers(-spec.width_shift_px, spec.width_shift_px + 1)) if spec.width_shift_px else 0
    dy = int(rng.integers(-spec.height_shift_px, spec.height_shift_px + 1)) if spec.height_shift_px else 0
    if dx or dy:
        out = shift(out, dx, dy)
    return out


def zca_whiten(batch, epsilon=1e-6) -> np.ndarray:
    """ZCA-whiten a batch over its flattened features.

    Uses the thin SVD of the centered data matrix, so the feature count may
    exceed the batch size.
    """
    batch = np.asarray(batch, dtype=np.float64)
    n = batch.shape[0]
    if n < 2:
        return batch - batch.mean(axis=0, keepdims=True)
    flat = batch.reshape(n, -1)
    centered = flat - flat.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    variances = s**2 / n
    white = (u * (s / np.sqrt(variances + epsilon))) @ vt
    return white.reshape(batch.shape)


def augment_batch(images, spec: AugmentationSpec, rngs) -> np.ndarray:
    """Augment each image with its own generator, then optionally ZCA the batch."""
    out = np.stack([augment(img, spec, rng) for img, rng in zip(images, rngs)])
    if spec.zca_whitening:
        out = zca_whiten(out, spec.zca_epsilon)
    return out


# ------------------------------------------------------------- pipelines


def prepare_image(pixels, size=224, denoise_method=None, denoise_params=None) -> np.ndarray:
    """Deterministic preprocessing: optional denoise, normalize, resize to HWC."""
    x = _check_grid(pixels)
    if denoise_method:
        x = denoise(x, denoise_method, **(denoise_params or {}))
    return resize_to_input(normalize(x), size)


class CXRPreprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer: list of 2-D grids -> (n, size, size, 3) array."""

    def __init__(self, size=224, denoise_method=None, denoise_params=None):
        self.size = size
        self.denoise_method = denoise_method
        self.denoise_params = denoise_params

    def fit(self, X, y=None):
        if self.denoise_method is not None and self.denoise_method not in DENOISE_METHODS:
            raise ConfigError(f"unknown denoising method {self.denoise_method!r}")
        return self

    def transform(self, X):
        if len(X) == 0:
            return np.zeros((0, self.size, self.size, 3))
        return np.stack([prepare_image(x, self.size, self.denoise_method, self.denoise_params) for x in X])


class ZCAWhitener(TransformerMixin, BaseEstimator):
    """ZCA whitening fitted on one batch and reusable on others."""

    def __init__(self, epsilon=1e-6):
        self.epsilon = epsilon

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        flat = X.reshape(X.shape[0], -1)
        self.mean_ = flat.mean(axis=0)
        _, s, vt = np.linalg.svd(flat - self.mean_, full_matrices=False)
        self.components_ = vt
        self.scales_ = 1.0 / np.sqrt(s**2 / X.shape[0] + self.epsilon)
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        flat = X.reshape(X.shape[0], -1) - self.mean_
        white = ((flat @ self.components_.T) * self.scales_) @ self.components_
        return white.reshape(X.shape)
