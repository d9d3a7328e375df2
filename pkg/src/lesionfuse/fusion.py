"""Feature-fusion head: combination-factor arithmetic and reducer/classifier.

The classifier input mixes two sources: image features compressed by a
small trainable reducer network, and the 28-slot clinical vector.  A single
combination factor c_f in [0, 1) fixes the share each source contributes.
The clinical width n_cli is held constant, so the reducer output width and
the classifier input width follow from

    total  = ceil(n_cli / (1 - c_f))
    n_img  = total - n_cli

which makes the image share of the classifier input approximately c_f.
The image-only variant keeps the same reducer sizing so both variants have
comparable head capacity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .data import CLINICAL_DIM, DIAGNOSES

N_CLASSES = len(DIAGNOSES)
SCENARIOS = ("image_only", "fused")

# absorbs float rounding so exact-integer ratios don't ceil one too high
_CEIL_EPS = 1e-9


def reduced_image_features(n_cli: int, c_f: float) -> int:
    """Width of the reducer output: ceil(n_cli / (1 - c_f) - n_cli)."""
    if n_cli < 1:
        raise ValueError("n_cli must be a positive integer")
    if not 0.0 <= c_f < 1.0:
        raise ValueError(f"combination factor must lie in [0, 1), got {c_f}")
    width = math.ceil(n_cli / (1.0 - c_f) - n_cli - _CEIL_EPS)
    if width < 1:
        raise ValueError(
            f"reducer width must be positive; c_f={c_f} leaves no image features"
        )
    return width


def total_features(n_cli: int, c_f: float) -> int:
    """Classifier input width for the fused head: reducer output + n_cli."""
    return reduced_image_features(n_cli, c_f) + n_cli


@dataclass(frozen=True)
class FusionConfig:
    """Shape parameters for one classification head."""

    c_f: float
    backbone_dim: int
    scenario: str = "fused"
    n_cli: int = CLINICAL_DIM
    dropout: float = 0.5
    vgg_intermediate: Optional[int] = None
    n_classes: int = N_CLASSES

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if not 0.0 <= self.c_f < 1.0:
            raise ValueError("combination factor must lie in [0, 1)")
        if self.backbone_dim < 1:
            raise ValueError("backbone_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.vgg_intermediate is not None and self.vgg_intermediate < 1:
            raise ValueError("vgg_intermediate must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")


@dataclass(frozen=True)
class HeadSpec:
    """Explicit layer widths of a head, serialized into checkpoints."""

    reducer_layers: tuple[tuple[int, int], ...]
    scenario: str
    n_cli: int
    dropout: float
    n_classes: int = N_CLASSES

    def __post_init__(self) -> None:
        if not self.reducer_layers:
            raise ValueError("reducer must have at least one layer")
        for (_, out_w), (in_w, _) in zip(self.reducer_layers, self.reducer_layers[1:]):
            if out_w != in_w:
                raise ValueError("reducer layer widths do not chain")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")

    @property
    def n_img(self) -> int:
        return self.reducer_layers[-1][1]

    @property
    def uses_clinical(self) -> bool:
        return self.scenario == "fused"

    @property
    def concat_width(self) -> int:
        return self.n_img + (self.n_cli if self.uses_clinical else 0)

    def to_dict(self) -> dict:
        return {
            "reducer_layers": [list(layer) for layer in self.reducer_layers],
            "scenario": self.scenario,
            "n_cli": self.n_cli,
            "dropout": self.dropout,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSpec":
        return cls(
            reducer_layers=tuple(tuple(layer) for layer in d["reducer_layers"]),
            scenario=d["scenario"],
            n_cli=d["n_cli"],
            dropout=d["dropout"],
            n_classes=d["n_classes"],
        )


def build_head(config: FusionConfig) -> HeadSpec:
    """Derive the head layout from a fusion config.

    The reducer is one affine layer backbone_dim -> n_img; very wide
    backbones (the VGG family) get an intermediate layer first.  Every
    reducer layer is followed by a ReLU and dropout; the classifier is a
    single affine layer from the concatenation width to the class count.
    """
    n_img = reduced_image_features(config.n_cli, config.c_f)
    if config.vgg_intermediate is None:
        layers = ((config.backbone_dim, n_img),)
    else:
        layers = ((config.backbone_dim, config.vgg_intermediate),
                  (config.vgg_intermediate, n_img))
    return HeadSpec(
        reducer_layers=layers,
        scenario=config.scenario,
        n_cli=config.n_cli,
        dropout=config.dropout,
        n_classes=config.n_classes,
    )


class FusionHead(nn.Module):
    """Reducer + classifier over image features and (optionally) clinical data.

    Produces class probabilities; in eval mode dropout is disabled and the
    output is deterministic.
    """

    def __init__(self, spec: HeadSpec):
        super().__init__()
        self.spec = spec
        blocks = []
        for in_w, out_w in spec.reducer_layers:
            blocks += [nn.Linear(in_w, out_w), nn.ReLU(), nn.Dropout(spec.dropout)]
        self.reducer = nn.Sequential(*blocks)
        self.classifier = nn.Linear(spec.concat_width, spec.n_classes)

    def forward(
        self, image_features: torch.Tensor, clinical: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        squeeze = image_features.dim() == 1
        if squeeze:
            image_features = image_features.unsqueeze(0)
            if clinical is not None:
                clinical = clinical.unsqueeze(0)
        expected = self.spec.reducer_layers[0][0]
        if image_features.shape[-1] != expected:
            raise ValueError(
                f"image features have width {image_features.shape[-1]}, head expects {expected}"
            )
        if self.spec.uses_clinical:
            if clinical is None:
                raise ValueError("fused head requires the clinical vector")
            if clinical.shape[-1] != self.spec.n_cli:
                raise ValueError(
                    f"clinical vector has width {clinical.shape[-1]}, head expects {self.spec.n_cli}"
                )
            combined = torch.cat([self.reducer(image_features), clinical], dim=-1)
        else:
            if clinical is not None:
                raise ValueError("image-only head does not accept a clinical vector")
            combined = self.reducer(image_features)
        probs = torch.softmax(self.classifier(combined), dim=-1)
        return probs.squeeze(0) if squeeze else probs


def fuse_forward(
    image_features: torch.Tensor,
    clinical: Optional[torch.Tensor],
    head: FusionHead,
    mode: str = "eval",
) -> torch.Tensor:
    """Run the head in the requested mode and return class probabilities."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    head.train(mode == "train")
    return head(image_features, clinical)


class FusedClassifier(nn.Module):
    """Backbone feature extractor composed with a fusion head."""

    def __init__(self, extractor: nn.Module, head: FusionHead):
        super().__init__()
        self.extractor = extractor
        self.head = head

    def forward(
        self, images: torch.Tensor, clinical: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        return self.head(self.extractor(images), clinical)
