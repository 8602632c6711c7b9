"""Optimization: cross-entropy + L2, momentum SGD, fold orchestration."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .datasets import DatasetManifest, SplitPlan
from .errors import ConfigError, DenResCovError, InputError, NumericError
from .fusion import FusionModelConfig, as_nchw, build_model, forward, model_dtype
from .metrics import MetricsReport, evaluate, summarize_folds
from .preprocess import AugmentationSpec, augment_batch, load_image, prepare_image
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

LOSS_EPS = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 16
    l2_coefficient: float | None = None  # None: take the model config's value
    seed: int = 0
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    freeze_backbones: bool = False

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationSpec(**self.augmentation)
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.l2_coefficient is not None and self.l2_coefficient < 0:
            raise ConfigError("l2_coefficient must be nonnegative")

    def to_dict(self):
        d = asdict(self)
        d["augmentation"] = self.augmentation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def to_csv(self, timing=True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "acc", "seconds"] if timing else ["epoch", "loss", "acc"])
        for e, (l, a, s) in enumerate(zip(self.loss, self.accuracy, self.seconds), start=1):
            w.writerow([e, repr(l), repr(a)] + ([f"{s:.3f}"] if timing else []))
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), newline="\n")
        return path


def cross_entropy_loss(probs, labels, l2_term=0.0):
    """Mean of ``-sum_c y_c log(p_c + eps)`` plus an additive penalty term.

    ``labels`` is either one-hot rows or integer class indices. Works on
    numpy arrays and on torch tensors (keeping the autograd graph).
    """
    if torch.is_tensor(probs):
        if labels.ndim == 1:
            labels = nn.functional.one_hot(labels.long(), probs.shape[1]).to(probs.dtype)
        if labels.shape != probs.shape:
            raise InputError(f"labels {tuple(labels.shape)} vs probabilities {tuple(probs.shape)}")
        return -(labels * torch.log(probs + LOSS_EPS)).sum(dim=1).mean() + l2_term
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = np.eye(probs.shape[1])[labels.astype(int)]
    if labels.shape != probs.shape:
        raise InputError(f"labels {labels.shape} vs probabilities {probs.shape}")
    return float(-(labels * np.log(probs + LOSS_EPS)).sum(axis=1).mean() + l2_term)


def l2_penalty(model, coefficient):
    if not coefficient:
        return 0.0
    return coefficient * sum((w**2).sum() for w in model.kernel_parameters() if w.requires_grad)


class MomentumSGD:
    """Heavy-ball SGD: ``v <- m*v - lr*g``, ``theta <- theta + v``."""

    def __init__(self, params, lr, momentum=0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.momentum = momentum
        self.velocity = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v.mul_(self.momentum).sub_(self.lr * p.grad)
            p.add_(v)


def train_arrays(model, images, labels, config: TrainConfig, sample_ids=None) -> TrainHistory:
    """Train ``model`` in place on preprocessed NHWC ``images`` with integer ``labels``."""
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise InputError("cannot train on an empty set")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise InputError(f"labels outside [0, {model.num_classes})")
    if len(images) != n:
        raise InputError(f"{len(images)} images but {n} labels")
    as_nchw(images[:1], model)  # shape check before any update
    if not np.isfinite(images).all():
        raise InputError("training images contain non-finite values")
    sample_ids = [str(i) for i in range(n)] if sample_ids is None else list(sample_ids)
    history = TrainHistory()

    if hasattr(model, "fit_labels"):
        # parameter-free stub models
        model.fit_labels(labels)
        probs = forward(model, images)
        acc = float((probs.argmax(1) == labels).mean())
        for _ in range(config.epochs):
            history.loss.append(cross_entropy_loss(probs, labels))
            history.accuracy.append(acc)
            history.seconds.append(0.0)
        return history

    for module in model.backbone_modules() if config.freeze_backbones else ():
        module.requires_grad_(False)
    l2 = config.l2_coefficient
    if l2 is None:
        l2 = getattr(model.config, "l2_coefficient", 0.0)
    optimizer = MomentumSGD(model.parameters(), config.learning_rate, config.momentum)
    dtype = model_dtype(model)
    model.train()
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = rng_for(config.seed, "shuffle", epoch).permutation(n)
        losses, correct = [], 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            batch = images[idx]
            aug = config.augmentation
            if aug != AugmentationSpec.identity():
                rngs = [rng_for(config.seed, "augment", epoch, sample_ids[i]) for i in idx]
                batch = augment_batch(batch, aug, rngs)
            x = torch.from_numpy(np.ascontiguousarray(batch)).to(dtype).permute(0, 3, 1, 2)
            y = torch.from_numpy(labels[idx])
            probs = model(x)
            loss = cross_entropy_loss(probs, y, l2_penalty(model, l2))
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch + 1}, batch {b + 1} (lr={config.learning_rate})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            correct += int((probs.argmax(1) == y).sum())
        history.loss.append(math.fsum(losses) / len(losses))
        history.accuracy.append(correct / n)
        history.seconds.append(time.perf_counter() - start)
        log.info("epoch %d loss %.4f acc %.3f", epoch + 1, history.loss[-1], history.accuracy[-1])
    model.eval()
    return history


# ------------------------------------------------------ manifest level


class ImageCache:
    """Deterministically preprocessed images keyed by sample id."""

    def __init__(self, size, denoise_method=None, denoise_params=None, loader=load_image):
        self.size = size
        self.denoise_method = denoise_method
        self.denoise_params = denoise_params
        self.loader = loader
        self._cache = {}

    def get(self, samples) -> np.ndarray:
        out = []
        for s in samples:
            if s.id not in self._cache:
                pixels = self.loader(s.path)
                self._cache[s.id] = prepare_image(
                    pixels, self.size, self.denoise_method, self.denoise_params
                ).astype(np.float32)
            out.append(self._cache[s.id])
        if not out:
            return np.zeros((0, self.size, self.size, 3), dtype=np.float32)
        return np.stack(out)


def fit(model, manifest: DatasetManifest, config: TrainConfig, cache: ImageCache | None = None):
    """Train on every sample of ``manifest``; returns ``(model, history)``."""
    if len(manifest) == 0:
        raise InputError("training manifest is empty")
    if model.num_classes != len(manifest.classes):
        raise ConfigError(f"model has {model.num_classes} outputs, manifest {len(manifest.classes)} classes")
    cache = cache or ImageCache(model.input_size)
    images = cache.get(manifest.samples)
    history = train_arrays(model, images, manifest.labels_index(), config, manifest.ids)
    return model, history


def evaluate_manifest(model, manifest: DatasetManifest, cache: ImageCache | None = None) -> MetricsReport:
    cache = cache or ImageCache(model.input_size)
    probs = forward(model, cache.get(manifest.samples))
    return evaluate(probs, manifest.labels_index(), manifest.classes)


class MajorityClassifier(nn.Module):
    """Stub that predicts the training-set class frequencies for every input."""

    def __init__(self, num_classes, input_size=32):
        super().__init__()
        self.num_classes = num_classes
        self.input_size = input_size
        self.register_buffer("prior", torch.full((num_classes,), 1.0 / num_classes, dtype=torch.float64))

    def fit_labels(self, labels):
        counts = np.bincount(labels, minlength=self.num_classes).astype(np.float64)
        # ties resolve to the lowest class index via argmax
        self.prior = torch.from_numpy(counts / counts.sum())

    def forward(self, x):
        return self.prior.to(x.dtype).expand(x.shape[0], -1).clone()


@dataclass
class FoldResult:
    fold: int
    model: nn.Module
    report: MetricsReport
    history: TrainHistory


def majority_factory(config: FusionModelConfig) -> nn.Module:
    return MajorityClassifier(config.num_classes, config.input_size)


def run_fold(manifest, plan, k, model_config, train_config, factory=None, cache=None) -> FoldResult:
    """Initialize, train and evaluate fold ``k`` (0-based) from its own derived seeds."""
    train_ids, test_ids = plan.folds[k]
    cache = cache or ImageCache(model_config.input_size)
    try:
        torch.manual_seed(derive_seed(train_config.seed, "init", k))
        model = (factory or build_model)(model_config)
        fold_train = TrainConfig(**{**train_config.__dict__, "seed": derive_seed(train_config.seed, "fold", k)})
        _, history = fit(model, manifest.subset(train_ids), fold_train, cache)
        report = evaluate_manifest(model, manifest.subset(test_ids), cache)
    except DenResCovError as exc:
        raise type(exc)(f"fold {k + 1}: {exc}") from exc
    return FoldResult(k + 1, model, report, history)


def cross_validate(
    manifest: DatasetManifest,
    plan: SplitPlan,
    model_config: FusionModelConfig,
    train_config: TrainConfig,
    model_factory: Callable[[FusionModelConfig], nn.Module] | None = None,
    cache: ImageCache | None = None,
    fold_order=None,
    jobs: int = 1,
):
    """Train and evaluate one fresh model per fold.

    Returns ``(results, summary)``; results are ordered by fold index
    whatever the execution order. ``jobs > 1`` runs folds in worker
    processes, which share nothing, so the results are unchanged.
    """
    if not plan.folds:
        raise ConfigError("split plan has no folds")
    order = list(fold_order) if fold_order is not None else list(range(len(plan.folds)))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                k: pool.submit(run_fold, manifest, plan, k, model_config, train_config, model_factory)
                for k in order
            }
            results = {k: f.result() for k, f in futures.items()}
    else:
        cache = cache or ImageCache(model_config.input_size)
        results = {k: run_fold(manifest, plan, k, model_config, train_config, model_factory, cache) for k in order}
    ordered = [results[k] for k in sorted(results)]
    return ordered, summarize_folds([r.report for r in ordered])


def save_train_config(config: TrainConfig, path):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def load_train_config(path) -> TrainConfig:
    try:
        return TrainConfig.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise ConfigError(f"train config not found: {path}") from None
