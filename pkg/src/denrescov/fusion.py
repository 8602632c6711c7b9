"""Dual-backbone fusion classifier.

Wiring::

    image -> ResNet-50 taps R1..R4, DenseNet-121 taps D1..D4
    Fk = fuse(Rk, Dk)                            (k = 1..4)
    A = ConvBlock(F1), B = ConvBlock(F2), C = ConvBlock(F3)   -> tap4 resolution
    a_concat = [A, B];  b_concat = [C, F4];  global_concat = [a_concat, b_concat]
    global average pool -> FC(head_hidden) -> ReLU -> FC(num_classes) -> softmax
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbones import (
    BackboneClassifier,
    BackboneConfig,
    BackboneKind,
    as_fraction,
    build_backbone,
    init_parameters,
    kernel_parameters,
    scaled_width,
)
from .errors import ConfigError, InputError, ShapeError
from .weights import WeightArchive

HEATMAP_LAYERS = (
    "new56",
    "new28",
    "new14",
    "new7",
    "convA",
    "convB",
    "convC",
    "a_concat",
    "b_concat",
    "global_concat",
)
ARCHITECTURES = ("fusion", "resnet50", "densenet121")


class FusionMode(str, enum.Enum):
    CONCAT_CHANNELS = "concat_channels"
    PROJECT_ADD = "project_add"


@dataclass
class FusionModelConfig:
    backbone_scale: Fraction = Fraction(1)
    input_size: int = 224
    num_classes: int = 4
    fusion_mode: FusionMode = FusionMode.CONCAT_CHANNELS
    conv_block_channels: int = 512
    head_hidden: int = 512
    pretrained: bool = False
    l2_coefficient: float = 1e-4
    architecture: str = "fusion"
    classes: list[str] | None = field(default=None)

    def __post_init__(self):
        self.backbone_scale = as_fraction(self.backbone_scale)
        try:
            self.fusion_mode = FusionMode(self.fusion_mode)
        except ValueError:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}") from None
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.conv_block_channels < 1 or self.head_hidden < 1:
            raise ConfigError("conv_block_channels and head_hidden must be >= 1")
        if self.l2_coefficient < 0:
            raise ConfigError("l2_coefficient must be nonnegative")
        if self.classes is not None and len(self.classes) != self.num_classes:
            raise ConfigError(f"{len(self.classes)} class names given for num_classes={self.num_classes}")
        # raises ConfigError for bad scale / input size
        self.backbone_config(BackboneKind.RESNET50)
        self.block_channels

    def backbone_config(self, kind) -> BackboneConfig:
        return BackboneConfig(kind, self.input_size, self.backbone_scale, self.pretrained)

    @property
    def block_channels(self) -> int:
        """Conv-block width after tiny-mode scaling."""
        return scaled_width(self.conv_block_channels, self.backbone_scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_scale"] = str(self.backbone_scale)
        d["fusion_mode"] = self.fusion_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FusionModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def fuse_stage(res_tap, des_tap, mode, projection=None):
    """Combine one ResNet tap with the DenseNet tap of the same resolution."""
    mode = FusionMode(mode)
    if res_tap.shape[0] != des_tap.shape[0] or res_tap.shape[2:] != des_tap.shape[2:]:
        raise ShapeError(f"cannot fuse taps of shapes {tuple(res_tap.shape)} and {tuple(des_tap.shape)}")
    if mode is FusionMode.CONCAT_CHANNELS:
        return torch.cat([res_tap, des_tap], dim=1)
    if projection is None:
        raise ConfigError("project_add fusion needs a projection layer")
    return projection(des_tap) + res_tap


class ConvBlock(nn.Sequential):
    """Repeated [3x3 conv -> BN -> ReLU -> 2x2 average pool] down to the target size."""

    def __init__(self, in_channels, out_channels, repetitions):
        super().__init__()
        self.repetitions = repetitions
        channels = in_channels
        for i in range(repetitions):
            self.add_module(f"conv{i}", nn.Conv2d(channels, out_channels, 3, padding=1))
            self.add_module(f"bn{i}", nn.BatchNorm2d(out_channels))
            self.add_module(f"relu{i}", nn.ReLU())
            self.add_module(f"pool{i}", nn.AvgPool2d(2, stride=2))
            channels = out_channels


def conv_block_repetitions(input_spatial: int, target_spatial: int = 7) -> int:
    ratio = input_spatial / target_spatial
    n = round(math.log2(ratio)) if ratio >= 1 else -1
    if n < 1 or target_spatial * 2**n != input_spatial:
        raise ConfigError(
            f"input size {input_spatial} is not a power-of-two multiple (>= 2x) of {target_spatial}"
        )
    return n


def build_conv_block(input_spatial, out_channels, in_channels=None, target_spatial=7) -> ConvBlock:
    n = conv_block_repetitions(input_spatial, target_spatial)
    block = ConvBlock(in_channels if in_channels is not None else out_channels, out_channels, n)
    init_parameters(block)
    return block


class FusionModel(nn.Module):
    def __init__(self, config: FusionModelConfig):
        super().__init__()
        self.config = config
        self.num_classes = config.num_classes
        self.input_size = config.input_size
        self.resnet = build_backbone(config.backbone_config(BackboneKind.RESNET50))
        self.densenet = build_backbone(config.backbone_config(BackboneKind.DENSENET121))
        res_c, des_c = self.resnet.tap_channels, self.densenet.tap_channels
        if config.fusion_mode is FusionMode.CONCAT_CHANNELS:
            self.fused_channels = tuple(r + d for r, d in zip(res_c, des_c))
            self.projections = None
        else:
            self.fused_channels = tuple(res_c)
            self.projections = nn.ModuleList(nn.Conv2d(d, r, 1, bias=False) for r, d in zip(res_c, des_c))
        sizes = self.resnet.tap_sizes
        width = config.block_channels
        self.conv_block_a = build_conv_block(sizes[0], width, self.fused_channels[0], sizes[3])
        self.conv_block_b = build_conv_block(sizes[1], width, self.fused_channels[1], sizes[3])
        self.conv_block_c = build_conv_block(sizes[2], width, self.fused_channels[2], sizes[3])
        self.global_channels = 2 * width + width + self.fused_channels[3]
        self.head_hidden = nn.Linear(self.global_channels, config.head_hidden)
        self.head_out = nn.Linear(config.head_hidden, config.num_classes)
        if self.projections is not None:
            init_parameters(self.projections)
        init_parameters(self.head_hidden)
        init_parameters(self.head_out)

    def fused_taps(self, x):
        r = self.resnet(x)
        d = self.densenet(x)
        out = []
        for k in range(4):
            proj = None if self.projections is None else self.projections[k]
            out.append(fuse_stage(r[k], d[k], self.config.fusion_mode, proj))
        return out

    def forward_features(self, x) -> dict[str, torch.Tensor]:
        """All named intermediate maps (NCHW) keyed by heatmap layer name."""
        f1, f2, f3, f4 = self.fused_taps(x)
        a = self.conv_block_a(f1)
        b = self.conv_block_b(f2)
        c = self.conv_block_c(f3)
        a_concat = torch.cat([a, b], 1)
        b_concat = torch.cat([c, f4], 1)
        return {
            "new56": f1,
            "new28": f2,
            "new14": f3,
            "new7": f4,
            "convA": a,
            "convB": b,
            "convC": c,
            "a_concat": a_concat,
            "b_concat": b_concat,
            "global_concat": torch.cat([a_concat, b_concat], 1),
        }

    def logits(self, x):
        pooled = self.forward_features(x)["global_concat"].mean(dim=(2, 3))
        return self.head_out(torch.relu(self.head_hidden(pooled)))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)

    def kernel_parameters(self):
        return kernel_parameters(self)

    def backbone_modules(self):
        return [self.resnet, self.densenet]

    def layer_shapes(self) -> dict[str, tuple[int, int, int]]:
        """(height, width, channels) of every named layer, from channel arithmetic."""
        s = self.resnet.tap_sizes
        w = self.config.block_channels
        fc = self.fused_channels
        return {
            "new56": (s[0], s[0], fc[0]),
            "new28": (s[1], s[1], fc[1]),
            "new14": (s[2], s[2], fc[2]),
            "new7": (s[3], s[3], fc[3]),
            "convA": (s[3], s[3], w),
            "convB": (s[3], s[3], w),
            "convC": (s[3], s[3], w),
            "a_concat": (s[3], s[3], 2 * w),
            "b_concat": (s[3], s[3], w + fc[3]),
            "global_concat": (s[3], s[3], self.global_channels),
        }


def build_fusion_model(config: FusionModelConfig | None = None, **kwargs) -> FusionModel:
    if config is None:
        config = FusionModelConfig(**kwargs)
    return FusionModel(config)


def build_model(config: FusionModelConfig) -> nn.Module:
    """Fusion model or a standalone backbone baseline, per ``config.architecture``."""
    if config.architecture == "fusion":
        return FusionModel(config)
    backbone = build_backbone(config.backbone_config(config.architecture))
    model = BackboneClassifier(backbone, config.num_classes)
    model.config = config
    return model


def model_dtype(model: nn.Module) -> torch.dtype:
    for t in model.parameters():
        return t.dtype
    for t in model.buffers():
        return t.dtype
    return torch.get_default_dtype()


def as_nchw(batch, model: nn.Module) -> torch.Tensor:
    """Validate an NHWC image batch and convert it to the model's NCHW tensor."""
    x = torch.as_tensor(np.ascontiguousarray(batch) if not torch.is_tensor(batch) else batch)
    size = model.input_size
    if x.ndim != 4 or tuple(x.shape[1:]) != (size, size, 3):
        raise ShapeError(f"expected batch shape (n, {size}, {size}, 3), got {tuple(x.shape)}")
    x = x.to(model_dtype(model))
    if not torch.isfinite(x).all():
        raise InputError("input batch contains non-finite values")
    return x.permute(0, 3, 1, 2).contiguous()


def forward(model: nn.Module, batch, chunk_size: int = 1) -> np.ndarray:
    """Class probabilities for an NHWC batch, in inference mode.

    CPU convolution kernels pick different code paths per batch size, so the
    default of one image per call keeps each row independent of its batch.
    """
    x = as_nchw(batch, model)
    if x.shape[0] == 0:
        return np.zeros((0, model.num_classes), dtype=np.float64)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = torch.cat([model(x[i : i + chunk_size]) for i in range(0, x.shape[0], chunk_size)])
    finally:
        model.train(was_training)
    return out.cpu().numpy().astype(np.float64)


def save_model(model: nn.Module, directory) -> Path:
    directory = Path(directory)
    WeightArchive.from_state_dict(model.state_dict(), source="denrescov").save(directory)
    (directory / "config.json").write_text(json.dumps(model.config.to_dict(), indent=2) + "\n")
    return directory


def load_model(directory) -> nn.Module:
    directory = Path(directory)
    try:
        config = FusionModelConfig.from_dict(json.loads((directory / "config.json").read_text()))
    except FileNotFoundError:
        raise InputError(f"no config.json in model directory {directory}") from None
    config.pretrained = False
    model = build_model(config)
    archive = WeightArchive.load(directory)
    state = model.state_dict()
    missing = [n for n in state if not n.endswith("num_batches_tracked") and n not in archive]
    if missing:
        raise InputError(f"model archive missing tensors: {', '.join(missing[:5])}")
    with torch.no_grad():
        for name in state:
            if name in archive:
                state[name].copy_(torch.from_numpy(archive.entries[name]))
    model.eval()
    return model
