"""Frozen face-recognition embedders (phi).

Every embedder resizes its input differentiably to the recognizer's
resolution and returns L2-normalized embeddings, so identity losses and
ID-Dis can backpropagate into the image.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional

import timm
import torch
import torch.nn.functional as F
from torch import nn

from .encoders.base import parameter_checksum
from .errors import UnknownBackendError, WeightsError
from .tensors import as_batch

NORM_EPS = 1e-8


class IdentityEmbedder(nn.Module, ABC):
    """Base class for frozen identity embedders."""

    name: str = "embedder"
    description: str = ""

    def __init__(self, input_size: int) -> None:
        super().__init__()
        self.input_size = input_size

    @abstractmethod
    def _embed(self, x: torch.Tensor) -> torch.Tensor:
        """[B, 3, S, S] in [-1, 1] -> unnormalized [B, D]."""
        raise NotImplementedError

    def freeze(self) -> "IdentityEmbedder":
        for param in self.parameters():
            param.requires_grad_(False)
        super().train(False)
        return self

    def train(self, mode: bool = True) -> "IdentityEmbedder":
        return super().train(False)

    def checksum(self) -> str:
        return parameter_checksum(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xb, added = as_batch(x, 4)
        if xb.shape[-2:] != (self.input_size, self.input_size):
            xb = F.interpolate(xb, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        embedding = F.normalize(self._embed(xb), dim=-1, eps=NORM_EPS)
        return embedding[0] if added else embedding


class ProjectionEmbedder(IdentityEmbedder):
    """Seeded random smooth conv net; a stand-in recognizer for tests and toy runs."""

    name = "projection"
    description = "Seeded random convolutional projection (no weights required)"

    def __init__(self, input_size: int = 64, dim: int = 128, seed: int = 0, **_: Any) -> None:
        super().__init__(input_size)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, 32, 5, stride=2, padding=2),
                nn.Tanh(),
                nn.Conv2d(32, 64, 5, stride=2, padding=2),
                nn.Tanh(),
                nn.AdaptiveAvgPool2d(4),
                nn.Flatten(),
                nn.Linear(64 * 16, dim),
            )
        self.freeze()

    def _embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class TimmEmbedder(IdentityEmbedder):
    """Any timm backbone with recognizer weights saved as a state dict."""

    name = "timm"
    description = "timm backbone loaded from a face-recognition state dict"

    def __init__(
        self,
        weights: Optional[str] = None,
        model_name: str = "resnet50",
        input_size: int = 112,
        **_: Any,
    ) -> None:
        super().__init__(input_size)
        self.backbone = timm.create_model(model_name, pretrained=False, num_classes=0)
        if weights is not None:
            path = Path(weights)
            if not path.exists():
                raise WeightsError(f"embedder weights not found: {path}")
            try:
                self.backbone.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
            except (RuntimeError, OSError) as exc:
                raise WeightsError(f"malformed embedder weights at {path}: {exc}") from exc
        self.freeze()

    def _embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)


class EmbedderRegistry:
    def __init__(self) -> None:
        self.embedders: Dict[str, type[IdentityEmbedder]] = {}

    def register(self, embedder: type[IdentityEmbedder]) -> None:
        self.embedders[embedder.name] = embedder

    def get(self, name: str) -> Optional[type[IdentityEmbedder]]:
        return self.embedders.get(name)

    def list(self) -> List[str]:
        return list(self.embedders.keys())


embedders = EmbedderRegistry()
embedders.register(ProjectionEmbedder)
embedders.register(TimmEmbedder)


def load_embedder(kind: str, **options: Any) -> IdentityEmbedder:
    cls = embedders.get(kind)
    if cls is None:
        raise UnknownBackendError(
            f"unknown embedder '{kind}' (known: {', '.join(embedders.list())})", key="embedder.kind"
        )
    return cls(**options)
