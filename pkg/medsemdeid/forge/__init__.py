"""Corpus construction: prompts, plans, generation, leakage filtering, manifests.

Only the dependency-free record and prompt modules are re-exported here;
import ``planner``, ``pipeline`` and ``generators`` explicitly.
"""

from .prompts import build_prompt, sample_injection_weight
from .records import ReferenceFace, SampleRecord, TargetDistributions, read_manifest

__all__ = [
    "ReferenceFace",
    "SampleRecord",
    "TargetDistributions",
    "build_prompt",
    "read_manifest",
    "sample_injection_weight",
]
