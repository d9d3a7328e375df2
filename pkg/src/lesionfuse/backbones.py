"""Registry of convolutional feature extractors with a uniform contract.

Every extractor maps a standardized (B, 3, H, W) batch to a flat
(B, feature_dim) feature tensor — the last feature map flattened.  The zoo
networks load ImageNet classification weights when ``pretrained`` is set;
downloads are cached under ``$LESIONFUSE_CACHE`` when that variable is set.

A ``tiny`` backbone (a small randomly initialized conv stack, 64 features)
exists purely so the full pipeline can run on a CPU in seconds; it has no
published weights and is excluded from model-comparison reports.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import torch
from torch import nn

FEATURE_DIMS = {
    "resnet50": 2048,
    "resnet101": 2048,
    "googlenet": 1024,
    "vgg13bn": 25088,
    "vgg19bn": 25088,
    "mobilenet": 1024,
    "tiny": 64,
}

CACHE_ENV_VAR = "LESIONFUSE_CACHE"


class WeightsUnavailableError(RuntimeError):
    """Pretrained weights could not be obtained for a requested backbone."""


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    feature_dim: int
    pretrained: bool
    trainable: bool = True


class FeatureExtractor(nn.Module):
    """Wraps a backbone body that already ends in flatten."""

    def __init__(self, body: nn.Module, spec: BackboneSpec):
        super().__init__()
        self.body = body
        self.spec = spec

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        features = self.body(images)
        if features.shape[-1] != self.spec.feature_dim:
            raise RuntimeError(
                f"{self.spec.name} produced {features.shape[-1]} features, "
                f"expected {self.spec.feature_dim}"
            )
        return features


def _conv_bn_relu(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class TinyConvNet(nn.Module):
    """Three strided conv blocks + global average pool -> 64 features."""

    def __init__(self):
        super().__init__()
        self.stack = nn.Sequential(
            _conv_bn_relu(3, 16, stride=2),
            _conv_bn_relu(16, 32, stride=2),
            _conv_bn_relu(32, 64, stride=2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stack(x)


class _DepthwiseSeparable(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, in_ch, 3, stride=stride, padding=1, groups=in_ch, bias=False),
            nn.BatchNorm2d(in_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(in_ch, out_ch, 1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class MobileNetV1(nn.Module):
    """Depthwise-separable convolution stack at full width -> 1024 features."""

    _PLAN = [
        (32, 64, 1), (64, 128, 2), (128, 128, 1), (128, 256, 2), (256, 256, 1),
        (256, 512, 2), (512, 512, 1), (512, 512, 1), (512, 512, 1), (512, 512, 1),
        (512, 512, 1), (512, 1024, 2), (1024, 1024, 1),
    ]

    def __init__(self):
        super().__init__()
        layers: list[nn.Module] = [
            nn.Sequential(
                nn.Conv2d(3, 32, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(32),
                nn.ReLU(inplace=True),
            )
        ]
        layers += [_DepthwiseSeparable(*plan) for plan in self._PLAN]
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.stack = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stack(x)


def _apply_cache_dir() -> None:
    cache = os.environ.get(CACHE_ENV_VAR)
    if cache:
        torch.hub.set_dir(cache)


def _zoo_weights(enum_cls, pretrained: bool):
    return enum_cls.IMAGENET1K_V1 if pretrained else None


def _load_zoo_body(name: str, pretrained: bool) -> nn.Module:
    from torchvision import models

    _apply_cache_dir()
    try:
        if name in ("resnet50", "resnet101"):
            ctor = models.resnet50 if name == "resnet50" else models.resnet101
            enum_cls = (models.ResNet50_Weights if name == "resnet50"
                        else models.ResNet101_Weights)
            net = ctor(weights=_zoo_weights(enum_cls, pretrained))
            net.fc = nn.Identity()
            return net
        if name == "googlenet":
            if pretrained:
                net = models.googlenet(
                    weights=_zoo_weights(models.GoogLeNet_Weights, True),
                    aux_logits=False,
                )
            else:
                net = models.googlenet(weights=None, aux_logits=False, init_weights=True)
            net.dropout = nn.Identity()
            net.fc = nn.Identity()
            return net
        if name in ("vgg13bn", "vgg19bn"):
            ctor = models.vgg13_bn if name == "vgg13bn" else models.vgg19_bn
            enum_cls = (models.VGG13_BN_Weights if name == "vgg13bn"
                        else models.VGG19_BN_Weights)
            net = ctor(weights=_zoo_weights(enum_cls, pretrained))
            return nn.Sequential(net.features, net.avgpool, nn.Flatten())
    except WeightsUnavailableError:
        raise
    except Exception as exc:  # zoo download/IO failures
        raise WeightsUnavailableError(
            f"could not load pretrained weights for {name!r}: {exc}; "
            f"set {CACHE_ENV_VAR} to a directory with pre-downloaded checkpoints "
            "or pass pretrained=False"
        ) from exc
    raise KeyError(name)


def create_extractor(name: str, pretrained: bool = False) -> FeatureExtractor:
    """Build a named feature extractor from the registry.

    ``pretrained`` loads ImageNet classification weights for the zoo
    networks.  ``mobilenet`` (full-width, depthwise-separable) has no
    published checkpoint in this stack and raises when pretrained weights
    are requested; ``tiny`` is random by design and ignores the flag.
    """
    if name not in FEATURE_DIMS:
        raise KeyError(
            f"unknown backbone {name!r}; available: {', '.join(sorted(FEATURE_DIMS))}"
        )
    if name == "tiny":
        body: nn.Module = TinyConvNet()
        pretrained = False
    elif name == "mobilenet":
        if pretrained:
            raise WeightsUnavailableError(
                "no published pretrained checkpoint for 'mobilenet' in this stack; "
                "pass pretrained=False or load converted weights into the module"
            )
        body = MobileNetV1()
    else:
        body = _load_zoo_body(name, pretrained)
    spec = BackboneSpec(name=name, feature_dim=FEATURE_DIMS[name], pretrained=pretrained)
    return FeatureExtractor(body, spec)


def set_trainable(extractor: nn.Module, flag: bool) -> None:
    """Gate gradient updates for every extractor parameter.

    Toggling preserves current parameter values.  Normalization running
    statistics are buffers, not parameters, and still update in train mode.
    """
    for p in extractor.parameters():
        p.requires_grad_(flag)
    if isinstance(extractor, FeatureExtractor):
        extractor.spec = BackboneSpec(
            name=extractor.spec.name,
            feature_dim=extractor.spec.feature_dim,
            pretrained=extractor.spec.pretrained,
            trainable=flag,
        )
