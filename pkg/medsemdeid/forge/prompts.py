"""Prompt templating and attribute-injection weights."""
from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from ..labels import DISEASES, SEVERITIES
from .records import INJECTION_RANGE

PROMPT_TEMPLATE = "A face, eye with {name}, {severity}-level"


def build_prompt(disease: str, severity: str) -> str:
    if disease not in DISEASES:
        raise InvalidInputError(f"unknown disease '{disease}'")
    if severity not in SEVERITIES:
        raise InvalidInputError(f"unknown severity '{severity}'")
    return PROMPT_TEMPLATE.format(name=DISEASES[disease], severity=severity)


def sample_injection_weight(rng: np.random.Generator) -> float:
    low, high = INJECTION_RANGE
    return float(rng.uniform(low, high))
