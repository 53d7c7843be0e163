"""Evaluator plugins."""

from .base import (
    ClassifierPlugin,
    EvaluatorPlugin,
    LandmarkPlugin,
    PerceptualPlugin,
    PluginRegistry,
    SegmenterPlugin,
    load_plugin,
    registry,
)
from .lpips_metric import LpipsPlugin
from .stubs import ConstantClassifier, LesionColorClassifier, LesionColorSegmenter, OracleClassifier, PixelRMSE

registry.register(OracleClassifier)
registry.register(ConstantClassifier)
registry.register(LesionColorClassifier)
registry.register(LesionColorSegmenter)
registry.register(PixelRMSE)
registry.register(LpipsPlugin)

__all__ = [
    "ClassifierPlugin",
    "EvaluatorPlugin",
    "LandmarkPlugin",
    "PerceptualPlugin",
    "PluginRegistry",
    "SegmenterPlugin",
    "ConstantClassifier",
    "LesionColorClassifier",
    "LesionColorSegmenter",
    "LpipsPlugin",
    "OracleClassifier",
    "PixelRMSE",
    "load_plugin",
    "registry",
]
