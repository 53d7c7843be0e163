"""Deterministic plugins that need no trained model.

The lesion-color plugins read the colored patches the synthetic corpus
draws, which makes toy evaluations meaningful without a real classifier.
"""
from __future__ import annotations

from typing import Any, List, Optional, Sequence

import torch

from ..errors import ConfigError
from ..labels import DISEASE_CODES, LESION_COLORS
from ..tensors import to_unit_range
from .base import ClassifierPlugin, PerceptualPlugin, SegmenterPlugin


class OracleClassifier(ClassifierPlugin):
    name = "oracle"
    description = "Returns the ground-truth labels"

    def __init__(self, **_: Any) -> None:
        pass

    def predict(self, images: torch.Tensor, reference_labels: Optional[Sequence[str]] = None) -> List[str]:
        if reference_labels is None or len(reference_labels) != images.shape[0]:
            raise ConfigError("oracle classifier needs one reference label per image", key="eval.classifier")
        return list(reference_labels)


class ConstantClassifier(ClassifierPlugin):
    name = "constant"
    description = "Predicts one fixed label"

    def __init__(self, label: str = "Normal", **_: Any) -> None:
        if label not in DISEASE_CODES:
            raise ConfigError(f"unknown label '{label}'", key="eval.classifier_options.label")
        self.label = label

    def predict(self, images: torch.Tensor, reference_labels: Optional[Sequence[str]] = None) -> List[str]:
        return [self.label] * images.shape[0]


def _lesion_votes(images: torch.Tensor, tolerance: float) -> torch.Tensor:
    """[B, C, H, W] per-lesion-color pixel hits."""
    rgb = to_unit_range(images) * 255.0
    palette = torch.tensor(list(LESION_COLORS.values()), dtype=rgb.dtype, device=rgb.device)
    diff = rgb.unsqueeze(1) - palette[None, :, :, None, None]
    return torch.linalg.vector_norm(diff, dim=2) < tolerance


class LesionColorClassifier(ClassifierPlugin):
    name = "lesion-color"
    description = "Labels an image by its dominant lesion color"

    def __init__(self, tolerance: float = 40.0, min_pixels: int = 6, **_: Any) -> None:
        self.tolerance = tolerance
        self.min_pixels = min_pixels

    def predict(self, images: torch.Tensor, reference_labels: Optional[Sequence[str]] = None) -> List[str]:
        counts = _lesion_votes(images, self.tolerance).flatten(2).sum(dim=2)
        codes = list(LESION_COLORS)
        best = counts.max(dim=1)
        return [
            codes[int(j)] if int(n) >= self.min_pixels else "Normal"
            for n, j in zip(best.values, best.indices)
        ]


class LesionColorSegmenter(SegmenterPlugin):
    name = "lesion-color"
    description = "Segments pixels close to any lesion color"

    def __init__(self, tolerance: float = 40.0, **_: Any) -> None:
        self.tolerance = tolerance

    def segment(self, images: torch.Tensor) -> torch.Tensor:
        return _lesion_votes(images, self.tolerance).any(dim=1)


class PixelRMSE(PerceptualPlugin):
    name = "pixel-rmse"
    description = "Root-mean-square pixel error (not a learned metric)"

    def __init__(self, **_: Any) -> None:
        pass

    def distance(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return ((x - y) ** 2).flatten(1).mean(dim=1).sqrt()
