"""Scikit-learn compatible wrapper around the fusion network and its baselines."""
from __future__ import annotations

from fractions import Fraction

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .fusion import FusionModelConfig, build_model, forward
from .preprocess import AugmentationSpec
from .seeding import derive_seed
from .training import TrainConfig, train_arrays
from .validation import check_image_batch, check_labels
from .weights import load_pretrained_dir


class DenResCovClassifier(ClassifierMixin, BaseEstimator):
    """Dual-backbone chest X-ray classifier.

    ``X`` holds preprocessed square images, ``(n, s, s)`` or ``(n, s, s, 3)``
    with ``s == input_size``; chain a :class:`~denrescov.preprocess.CXRPreprocessor`
    in a pipeline to start from raw grids. ``architecture`` selects the fusion
    network or one of the standalone ``resnet50`` / ``densenet121`` baselines.
    """

    def __init__(
        self,
        architecture="fusion",
        input_size=224,
        backbone_scale=1,
        fusion_mode="concat_channels",
        conv_block_channels=512,
        head_hidden=512,
        pretrained=False,
        weights_dir=None,
        learning_rate=0.001,
        momentum=0.9,
        epochs=30,
        batch_size=16,
        l2_coefficient=1e-4,
        augmentation=None,
        freeze_backbones=False,
        random_state=0,
    ):
        self.architecture = architecture
        self.input_size = input_size
        self.backbone_scale = backbone_scale
        self.fusion_mode = fusion_mode
        self.conv_block_channels = conv_block_channels
        self.head_hidden = head_hidden
        self.pretrained = pretrained
        self.weights_dir = weights_dir
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.l2_coefficient = l2_coefficient
        self.augmentation = augmentation
        self.freeze_backbones = freeze_backbones
        self.random_state = random_state

    def _model_config(self, n_classes):
        return FusionModelConfig(
            backbone_scale=Fraction(self.backbone_scale),
            input_size=self.input_size,
            num_classes=n_classes,
            fusion_mode=self.fusion_mode,
            conv_block_channels=self.conv_block_channels,
            head_hidden=self.head_hidden,
            pretrained=self.pretrained,
            l2_coefficient=self.l2_coefficient,
            architecture=self.architecture,
            classes=[str(c) for c in self.classes_],
        )

    def _train_config(self):
        aug = self.augmentation
        if aug is None:
            aug = AugmentationSpec()
        elif isinstance(aug, dict):
            aug = AugmentationSpec(**aug)
        elif aug is False:
            aug = AugmentationSpec.identity()
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            l2_coefficient=self.l2_coefficient,
            seed=derive_seed(self.random_state, "train"),
            augmentation=aug,
            freeze_backbones=self.freeze_backbones,
        )

    def fit(self, X, y):
        X = check_image_batch(X, self.input_size)
        y = check_labels(y, X.shape[0])
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        config = self._model_config(len(self.classes_))
        train_config = self._train_config()
        torch.manual_seed(derive_seed(self.random_state, "init"))
        self.model_ = build_model(config)
        if self.pretrained:
            load_pretrained_dir(self.model_, self.weights_dir)
        self.history_ = train_arrays(self.model_, X, y_idx, train_config)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return forward(self.model_, check_image_batch(X, self.input_size))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
