"""Dual-backbone (ResNet-50 + DenseNet-121) fusion classifier for chest X-rays."""
from .backbones import BackboneConfig, BackboneKind, build_backbone, stage_channels
from .datasets import DatasetManifest, SplitPlan, compose_dataset, monte_carlo_split
from .errors import (
    CompositionError,
    ConfigError,
    DataError,
    DenResCovError,
    InputError,
    LoadError,
    NumericError,
    ShapeError,
)
from .estimator import DenResCovClassifier
from .fusion import FusionMode, FusionModel, FusionModelConfig, build_model, forward, load_model, save_model
from .heatmaps import CircleAnnotation, circle_check, extract_heatmaps
from .metrics import MetricsReport, evaluate, multiclass_auc, prf1, roc_auc, summarize_folds
from .preprocess import AugmentationSpec, CXRPreprocessor, ZCAWhitener
from .training import TrainConfig, cross_validate, fit

__version__ = "0.1.0"

__all__ = [
    "AugmentationSpec",
    "BackboneConfig",
    "BackboneKind",
    "CXRPreprocessor",
    "CircleAnnotation",
    "CompositionError",
    "ConfigError",
    "DataError",
    "DatasetManifest",
    "DenResCovClassifier",
    "DenResCovError",
    "FusionMode",
    "FusionModel",
    "FusionModelConfig",
    "InputError",
    "LoadError",
    "MetricsReport",
    "NumericError",
    "ShapeError",
    "SplitPlan",
    "TrainConfig",
    "ZCAWhitener",
    "build_backbone",
    "build_model",
    "circle_check",
    "compose_dataset",
    "cross_validate",
    "evaluate",
    "extract_heatmaps",
    "fit",
    "forward",
    "load_model",
    "monte_carlo_split",
    "multiclass_auc",
    "prf1",
    "roc_auc",
    "save_model",
    "stage_channels",
    "summarize_folds",
]
