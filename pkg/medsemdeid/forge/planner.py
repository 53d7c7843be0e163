"""Generation plans: which (disease, severity, age, gender, reference) to request.

The guided planner stratifies every attribute to its target distribution;
the random planner is the unguided baseline it is compared against.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from ..errors import InvalidInputError
from ..labels import DISEASE_CODES, GENDERS, SEVERITIES
from .prompts import build_prompt, sample_injection_weight
from .records import ReferenceFace, TargetDistributions, assign_split

logger = logging.getLogger(__name__)

AGE_AXIS = (0.0, 100.0)


@dataclass(frozen=True)
class GenerationRequest:
    sample_id: str
    disease: str
    severity: str
    age: float
    gender: str
    injection_weight: float
    prompt: str
    split: str
    reference: Optional[ReferenceFace] = None


@dataclass(frozen=True)
class Shortfall:
    """A request for which no reference face of the right stratum exists."""

    sample_id: str
    gender: str
    age: float


@dataclass
class PlanResult:
    requests: List[GenerationRequest]
    shortfalls: List[Shortfall] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.requests)

    def shortfall_summary(self) -> Dict[str, int]:
        return dict(sorted(Counter(s.gender for s in self.shortfalls).items()))


def largest_remainder(pmf: Mapping[str, float], n: int) -> Dict[str, int]:
    """Integer counts summing to ``n`` that are as close as possible to ``n * pmf``.

    Leftover units go to the largest fractional parts; ties keep pmf order.
    """
    quotas = {label: n * p for label, p in pmf.items()}
    counts = {label: math.floor(q) for label, q in quotas.items()}
    leftover = n - sum(counts.values())
    order = sorted(quotas, key=lambda label: -(quotas[label] - counts[label]))
    for label in order[:leftover]:
        counts[label] += 1
    return counts


def stratified_ages(ages: Sequence[float], n: int) -> List[float]:
    """``n`` ages at the midpoint quantiles of the target sample."""
    levels = (np.arange(n) + 0.5) / n
    return [float(a) for a in np.quantile(np.asarray(ages, dtype=np.float64), levels, method="inverted_cdf")]


def _expand(counts: Mapping[str, int]) -> List[str]:
    return [label for label, count in counts.items() for _ in range(count)]


class ReferenceMatcher:
    """Nearest-age same-gender reference, spreading use across equally close faces."""

    def __init__(self, references: Sequence[ReferenceFace], max_age_gap: float) -> None:
        self.references = sorted(references, key=lambda r: r.face_id)
        self.max_age_gap = max_age_gap
        self.uses: Counter = Counter()

    def match(self, age: float, gender: str) -> Optional[ReferenceFace]:
        candidates = [
            r for r in self.references if r.gender == gender and abs(r.age - age) <= self.max_age_gap
        ]
        if not candidates:
            return None
        best = min(candidates, key=lambda r: (abs(r.age - age), self.uses[r.face_id], r.face_id))
        self.uses[best.face_id] += 1
        return best


def _assemble(
    diseases: Sequence[str],
    ages: Sequence[float],
    genders: Sequence[str],
    rng: np.random.Generator,
    seed: int,
    references: Optional[Sequence[ReferenceFace]],
    max_age_gap: float,
) -> PlanResult:
    matcher = ReferenceMatcher(references, max_age_gap) if references is not None else None
    requests: List[GenerationRequest] = []
    shortfalls: List[Shortfall] = []
    for i, (disease, age, gender) in enumerate(zip(diseases, ages, genders)):
        sample_id = f"s{seed}-{i:06d}"
        severity = SEVERITIES[int(rng.integers(len(SEVERITIES)))]
        weight = sample_injection_weight(rng)
        reference = None
        if matcher is not None:
            reference = matcher.match(age, gender)
            if reference is None:
                shortfalls.append(Shortfall(sample_id, gender, age))
        requests.append(
            GenerationRequest(
                sample_id=sample_id,
                disease=disease,
                severity=severity,
                age=age,
                gender=gender,
                injection_weight=weight,
                prompt=build_prompt(disease, severity),
                split=assign_split(sample_id, seed),
                reference=reference,
            )
        )
    if shortfalls:
        logger.warning("%d of %d requests have no reference face within %.1f years", len(shortfalls), len(requests), max_age_gap)
    return PlanResult(requests, shortfalls)


def distribution_guided_plan(
    targets: TargetDistributions,
    n: int,
    *,
    seed: int = 0,
    references: Optional[Sequence[ReferenceFace]] = None,
    max_age_gap: float = 10.0,
) -> PlanResult:
    """Plan ``n`` requests whose attribute marginals follow ``targets``.

    Disease and gender counts use largest-remainder apportionment, ages the
    midpoint quantiles of the target ages; the three lists are paired by
    independent shuffles so marginals are exact and attributes independent.
    """
    if n < 1:
        raise InvalidInputError("plan size must be >= 1")
    rng = np.random.default_rng([seed, 0])
    diseases = _expand(largest_remainder(targets.disease, n))
    genders = _expand(largest_remainder(targets.gender, n))
    ages = stratified_ages(targets.ages, n)
    diseases = [diseases[i] for i in rng.permutation(n)]
    genders = [genders[i] for i in rng.permutation(n)]
    ages = [ages[i] for i in rng.permutation(n)]
    return _assemble(diseases, ages, genders, rng, seed, references, max_age_gap)


def random_plan(
    n: int,
    *,
    seed: int = 0,
    references: Optional[Sequence[ReferenceFace]] = None,
    max_age_gap: float = 10.0,
) -> PlanResult:
    """Unguided baseline: uniform disease and gender, ages uniform on the age axis."""
    if n < 1:
        raise InvalidInputError("plan size must be >= 1")
    rng = np.random.default_rng([seed, 0])
    diseases = [DISEASE_CODES[i] for i in rng.integers(len(DISEASE_CODES), size=n)]
    genders = [GENDERS[i] for i in rng.integers(len(GENDERS), size=n)]
    ages = [float(a) for a in np.round(rng.uniform(*AGE_AXIS, size=n), 1)]
    return _assemble(diseases, ages, genders, rng, seed, references, max_age_gap)


def make_plan(
    planner: str,
    targets: TargetDistributions,
    n: int,
    *,
    seed: int = 0,
    references: Optional[Sequence[ReferenceFace]] = None,
    max_age_gap: float = 10.0,
) -> PlanResult:
    if planner == "guided":
        return distribution_guided_plan(targets, n, seed=seed, references=references, max_age_gap=max_age_gap)
    if planner == "random":
        return random_plan(n, seed=seed, references=references, max_age_gap=max_age_gap)
    raise InvalidInputError(f"unknown planner '{planner}'")
