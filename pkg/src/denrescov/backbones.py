"""ResNet-50 and DenseNet-121 feature extractors with four stage taps.

Both networks are written out here rather than borrowed so that widths can
be scaled down (``channel_scale < 1``) for fast desk-scale checks. Module and
tensor names follow the torchvision layout, which keeps ImageNet checkpoint
conversion a pure renaming step.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

RESNET50_LAYERS = (3, 4, 6, 3)
RESNET_PLANES = (64, 128, 256, 512)
RESNET_EXPANSION = 4
DENSENET121_BLOCKS = (6, 12, 24, 16)
DENSENET_GROWTH = 32
DENSENET_INIT_FEATURES = 64
DENSENET_BN_SIZE = 4
STEM_WIDTH = 64


class BackboneKind(str, enum.Enum):
    RESNET50 = "resnet50"
    DENSENET121 = "densenet121"


def as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def scaled_width(width: int, scale: Fraction) -> int:
    value = width * scale
    if value.denominator != 1 or value <= 0:
        raise ConfigError(
            f"channel_scale {scale} gives non-integer width {float(value)} for base width {width}"
        )
    return int(value)


@dataclass(frozen=True)
class BackboneConfig:
    kind: BackboneKind = BackboneKind.RESNET50
    input_size: int = 224
    channel_scale: Fraction = Fraction(1)
    pretrained: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", BackboneKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown backbone kind {self.kind!r}") from None
        object.__setattr__(self, "channel_scale", as_fraction(self.channel_scale))
        if not 0 < self.channel_scale <= 1:
            raise ConfigError(f"channel_scale must lie in (0, 1], got {self.channel_scale}")
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.pretrained and self.channel_scale != 1:
            raise ConfigError("pretrained weights require channel_scale = 1")
        # validates every width up front
        stage_channels(self.kind, self.channel_scale)


class StageTaps(NamedTuple):
    """Feature maps at the end of the four resolution stages (NCHW tensors)."""

    tap1: torch.Tensor
    tap2: torch.Tensor
    tap3: torch.Tensor
    tap4: torch.Tensor


def stage_channels(kind, scale=Fraction(1)) -> tuple[int, int, int, int]:
    """Channel count of each tap, from the architecture tables alone."""
    scale = as_fraction(scale)
    kind = BackboneKind(kind)
    if kind is BackboneKind.RESNET50:
        scaled_width(STEM_WIDTH, scale)
        return tuple(scaled_width(p, scale) * RESNET_EXPANSION for p in RESNET_PLANES)
    growth = scaled_width(DENSENET_GROWTH, scale)
    channels = scaled_width(DENSENET_INIT_FEATURES, scale)
    taps = []
    for i, n_layers in enumerate(DENSENET121_BLOCKS):
        channels += n_layers * growth
        taps.append(channels)
        if i < len(DENSENET121_BLOCKS) - 1:
            if channels % 2:
                raise ConfigError(f"channel_scale {scale} gives odd transition width {channels}")
            channels //= 2
    return tuple(taps)


def tap_spatial(input_size: int) -> tuple[int, int, int, int]:
    return tuple(input_size // 2 ** (k + 1) for k in range(1, 5))


def init_parameters(module: nn.Module) -> None:
    """Fan-in scaled normal conv kernels, Glorot-uniform dense kernels, zero
    biases, unit/zero normalization, zero scale on each residual branch's last BN."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            else:
                nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    # each residual unit starts as the identity; otherwise the summed skip
    # paths give very large stem gradients at random init
    for m in module.modules():
        if isinstance(m, Bottleneck):
            nn.init.zeros_(m.bn3.weight)


# ---------------------------------------------------------------- ResNet-50


class Bottleneck(nn.Module):
    """Residual unit: ``out = relu(transform(x) + shortcut(x))``.

    The stride sits on the 3x3 convolution (torchvision "v1.5" layout).
    """

    def __init__(self, inplanes, planes, stride=1, downsample=None):
        super().__init__()
        width = planes
        self.conv1 = nn.Conv2d(inplanes, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, planes * RESNET_EXPANSION, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * RESNET_EXPANSION)
        self.relu = nn.ReLU()
        self.downsample = downsample

    def transform(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        return self.bn3(self.conv3(out))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        return self.relu(self.transform(x) + identity)


class ResNet50(nn.Module):
    def __init__(self, scale=Fraction(1)):
        super().__init__()
        scale = as_fraction(scale)
        stem = scaled_width(STEM_WIDTH, scale)
        self.conv1 = nn.Conv2d(3, stem, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(stem)
        self.relu = nn.ReLU()
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        inplanes = stem
        for i, (planes, blocks) in enumerate(zip(RESNET_PLANES, RESNET50_LAYERS)):
            planes = scaled_width(planes, scale)
            stride = 1 if i == 0 else 2
            layers = []
            for b in range(blocks):
                downsample = None
                if b == 0 and (stride != 1 or inplanes != planes * RESNET_EXPANSION):
                    downsample = nn.Sequential(
                        nn.Conv2d(inplanes, planes * RESNET_EXPANSION, 1, stride=stride, bias=False),
                        nn.BatchNorm2d(planes * RESNET_EXPANSION),
                    )
                layers.append(Bottleneck(inplanes, planes, stride if b == 0 else 1, downsample))
                inplanes = planes * RESNET_EXPANSION
            setattr(self, f"layer{i + 1}", nn.Sequential(*layers))

    def forward(self, x) -> StageTaps:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        t1 = self.layer1(x)
        t2 = self.layer2(t1)
        t3 = self.layer3(t2)
        t4 = self.layer4(t3)
        return StageTaps(t1, t2, t3, t4)


# ------------------------------------------------------------- DenseNet-121


class DenseLayer(nn.Module):
    """Composite function BN-ReLU-1x1conv-BN-ReLU-3x3conv on the concatenated inputs."""

    def __init__(self, in_channels, growth, bn_size):
        super().__init__()
        inner = bn_size * growth
        self.in_channels = in_channels
        self.norm1 = nn.BatchNorm2d(in_channels)
        self.relu1 = nn.ReLU()
        self.conv1 = nn.Conv2d(in_channels, inner, 1, bias=False)
        self.norm2 = nn.BatchNorm2d(inner)
        self.relu2 = nn.ReLU()
        self.conv2 = nn.Conv2d(inner, growth, 3, padding=1, bias=False)

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        x = torch.cat(features, 1)
        x = self.conv1(self.relu1(self.norm1(x)))
        return self.conv2(self.relu2(self.norm2(x)))


class DenseBlock(nn.ModuleDict):
    def __init__(self, n_layers, in_channels, growth, bn_size):
        super().__init__()
        for i in range(n_layers):
            self[f"denselayer{i + 1}"] = DenseLayer(in_channels + i * growth, growth, bn_size)

    def forward(self, x):
        features = [x]
        for layer in self.values():
            features.append(layer(features))
        return torch.cat(features, 1)


class Transition(nn.Sequential):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.add_module("norm", nn.BatchNorm2d(in_channels))
        self.add_module("relu", nn.ReLU())
        self.add_module("conv", nn.Conv2d(in_channels, out_channels, 1, bias=False))
        self.add_module("pool", nn.AvgPool2d(2, stride=2))


class DenseNet121(nn.Module):
    def __init__(self, scale=Fraction(1)):
        super().__init__()
        scale = as_fraction(scale)
        growth = scaled_width(DENSENET_GROWTH, scale)
        channels = scaled_width(DENSENET_INIT_FEATURES, scale)
        features = nn.Sequential()
        features.add_module("conv0", nn.Conv2d(3, channels, 7, stride=2, padding=3, bias=False))
        features.add_module("norm0", nn.BatchNorm2d(channels))
        features.add_module("relu0", nn.ReLU())
        features.add_module("pool0", nn.MaxPool2d(3, stride=2, padding=1))
        for i, n_layers in enumerate(DENSENET121_BLOCKS):
            features.add_module(f"denseblock{i + 1}", DenseBlock(n_layers, channels, growth, DENSENET_BN_SIZE))
            channels += n_layers * growth
            if i < len(DENSENET121_BLOCKS) - 1:
                features.add_module(f"transition{i + 1}", Transition(channels, channels // 2))
                channels //= 2
        features.add_module("norm5", nn.BatchNorm2d(channels))
        self.features = features

    def forward(self, x) -> StageTaps:
        f = self.features
        x = f.pool0(f.relu0(f.norm0(f.conv0(x))))
        t1 = f.denseblock1(x)
        t2 = f.denseblock2(f.transition1(t1))
        t3 = f.denseblock3(f.transition2(t2))
        t4 = F.relu(f.norm5(f.denseblock4(f.transition3(t3))))
        return StageTaps(t1, t2, t3, t4)


# ---------------------------------------------------------------- factories


class Backbone(nn.Module):
    """A configured feature extractor; ``forward`` maps NCHW images to taps."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        if config.kind is BackboneKind.RESNET50:
            self.net = ResNet50(config.channel_scale)
        else:
            self.net = DenseNet121(config.channel_scale)
        self.tap_channels = stage_channels(config.kind, config.channel_scale)
        self.tap_sizes = tap_spatial(config.input_size)
        init_parameters(self)

    def forward(self, x) -> StageTaps:
        return self.net(x)

    def tap_shapes(self) -> list[tuple[int, int, int]]:
        """(height, width, channels) of each tap."""
        return [(s, s, c) for s, c in zip(self.tap_sizes, self.tap_channels)]

    def archive_names(self) -> list[str]:
        """Tensor names a pretrained archive must cover."""
        return [name for name in self.net.state_dict() if not name.endswith("num_batches_tracked")]


def build_backbone(config: BackboneConfig | None = None, **kwargs) -> Backbone:
    if config is None:
        config = BackboneConfig(**kwargs)
    return Backbone(config)


class BackboneClassifier(nn.Module):
    """Standalone baseline: backbone, global average pool over tap4, softmax layer."""

    def __init__(self, backbone: Backbone, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        self.backbone = backbone
        self.num_classes = num_classes
        self.input_size = backbone.config.input_size
        self.fc = nn.Linear(backbone.tap_channels[3], num_classes)
        init_parameters(self.fc)

    def logits(self, x):
        tap4 = self.backbone(x).tap4
        return self.fc(tap4.mean(dim=(2, 3)))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)

    def kernel_parameters(self):
        return kernel_parameters(self)

    def backbone_modules(self):
        return [self.backbone]


def backbone_classifier(backbone: Backbone, num_classes: int) -> BackboneClassifier:
    return BackboneClassifier(backbone, num_classes)


def kernel_parameters(module: nn.Module) -> list[torch.Tensor]:
    """Convolution and fully-connected kernels (the L2-penalized set)."""
    return [m.weight for m in module.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
