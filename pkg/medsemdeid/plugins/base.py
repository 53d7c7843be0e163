"""Evaluator plugin interfaces and registry.

Plugins wrap models whose training is outside this package (disease
classifiers, lesion segmenters, learned perceptual metrics, landmark
detectors). A plugin that cannot be loaded yields an absent metric.
"""
from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional, Sequence

import torch

from ..errors import UnknownBackendError

logger = logging.getLogger(__name__)


class EvaluatorPlugin(ABC):
    """Base class for evaluator plugins."""

    name: str = "plugin"
    kind: str = ""
    description: str = ""


class ClassifierPlugin(EvaluatorPlugin):
    kind = "classifier"

    @abstractmethod
    def predict(self, images: torch.Tensor, reference_labels: Optional[Sequence[str]] = None) -> List[str]:
        """Return one disease code per image.

        ``reference_labels`` carries the ground truth; only oracle stubs
        read it.
        """
        raise NotImplementedError


class SegmenterPlugin(EvaluatorPlugin):
    kind = "segmenter"

    @abstractmethod
    def segment(self, images: torch.Tensor) -> torch.Tensor:
        """[B, 3, H, W] -> boolean lesion masks [B, H, W]."""
        raise NotImplementedError


class PerceptualPlugin(EvaluatorPlugin):
    kind = "perceptual"

    @abstractmethod
    def distance(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Per-sample distance [B], >= 0 and 0 for identical inputs."""
        raise NotImplementedError


class LandmarkPlugin(EvaluatorPlugin):
    """Slot for landmark and gaze error; no implementation ships."""

    kind = "landmark"

    @abstractmethod
    def landmark_error(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class PluginRegistry:
    """Registry for evaluator plugins."""

    def __init__(self) -> None:
        self.plugins: Dict[tuple[str, str], type[EvaluatorPlugin]] = {}

    def register(self, plugin: type[EvaluatorPlugin]) -> None:
        self.plugins[(plugin.kind, plugin.name)] = plugin

    def get(self, kind: str, name: str) -> Optional[type[EvaluatorPlugin]]:
        return self.plugins.get((kind, name))

    def list(self, kind: Optional[str] = None) -> List[str]:
        return [name for (k, name) in self.plugins if kind is None or k == kind]


registry = PluginRegistry()


def load_plugin(name: Optional[str], kind: str, **options: Any) -> Optional[EvaluatorPlugin]:
    """Instantiate a registered plugin of ``kind``; None when unset or unavailable."""
    if not name:
        return None
    plugin = registry.get(kind, name)
    if plugin is None:
        raise UnknownBackendError(
            f"unknown {kind} plugin '{name}' (known: {', '.join(registry.list(kind))})", key=f"eval.{kind}"
        )
    try:
        return plugin(**options)
    except ImportError as exc:
        logger.warning("%s plugin '%s' unavailable: %s", kind, name, exc)
        return None
