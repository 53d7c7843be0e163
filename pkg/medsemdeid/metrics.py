"""Evaluation metrics: identity distance, fidelity, overlap, agreement,
distribution gaps and face matching.

All reductions are deterministic; none depends on aggregation order.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, Hashable, List, Mapping, Optional, Sequence

import numpy as np
import ot
import torch
from statsmodels.stats.inter_rater import cohens_kappa as sm_cohens_kappa

from .errors import EmptyGalleryError, InvalidInputError, ShapeMismatchError
from .labels import DISEASE_CODES, GENDERS
from .plugins.base import ClassifierPlugin, PerceptualPlugin

Embedder = Callable[[torch.Tensor], torch.Tensor]

CATEGORICAL_KINDS = {"disease": DISEASE_CODES, "gender": GENDERS}
ATTRIBUTE_KINDS = ("disease", "age", "gender")


def id_dis(x: torch.Tensor, y: torch.Tensor, phi: Embedder) -> torch.Tensor:
    """Euclidean distance between unit-norm identity embeddings (per sample)."""
    return torch.linalg.vector_norm(phi(x) - phi(y), dim=-1)


def psnr(x: torch.Tensor, y: torch.Tensor) -> float:
    """Mean per-image PSNR in dB for images on the [0, 1] scale.

    Identical images give ``math.inf``.
    """
    if x.shape != y.shape:
        raise ShapeMismatchError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    xb = x.reshape(-1, *x.shape[-3:]).double()
    yb = y.reshape(-1, *y.shape[-3:]).double()
    mse = ((xb - yb) ** 2).flatten(1).mean(dim=1)
    values = [math.inf if float(m) == 0.0 else 10.0 * math.log10(1.0 / float(m)) for m in mse]
    return float(np.mean(values))


def perceptual_distance(x: torch.Tensor, y: torch.Tensor, plugin: Optional[PerceptualPlugin]) -> Optional[float]:
    """Mean learned perceptual distance, or None when no metric is loaded."""
    if plugin is None:
        return None
    return float(plugin.distance(x, y).mean())


def _mask_counts(a: torch.Tensor, b: torch.Tensor) -> tuple[int, int, int]:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    a, b = a.bool(), b.bool()
    return int((a & b).sum()), int(a.sum()), int(b.sum())


def dice(a: torch.Tensor, b: torch.Tensor) -> float:
    """2|A∩B| / (|A| + |B|); two empty masks agree perfectly."""
    inter, size_a, size_b = _mask_counts(a, b)
    if size_a + size_b == 0:
        return 1.0
    return 2.0 * inter / (size_a + size_b)


def jaccard(a: torch.Tensor, b: torch.Tensor) -> float:
    inter, size_a, size_b = _mask_counts(a, b)
    union = size_a + size_b - inter
    if union == 0:
        return 1.0
    return inter / union


def _label_order(labels: set[Hashable], classes: Sequence[Hashable]) -> List[Hashable]:
    known = [c for c in classes if c in labels]
    return known + sorted((l for l in labels if l not in classes), key=str)


def cohens_kappa(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    """Chance-corrected agreement between two label series.

    When chance agreement is exactly 1 (both raters always use one and the
    same label) kappa is 1.0 on full agreement and 0.0 otherwise.
    """
    if len(a) != len(b):
        raise InvalidInputError(f"label series lengths differ: {len(a)} vs {len(b)}")
    if not a:
        raise InvalidInputError("label series are empty")
    order = _label_order(set(a) | set(b), DISEASE_CODES)
    index = {label: i for i, label in enumerate(order)}
    table = np.zeros((len(order), len(order)), dtype=np.float64)
    for left, right in zip(a, b):
        table[index[left], index[right]] += 1
    n = table.sum()
    p_o = np.trace(table) / n
    p_e = float((table.sum(axis=1) / n) @ (table.sum(axis=0) / n))
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float(sm_cohens_kappa(table, return_results=False))


def per_class_kappa(
    a: Sequence[str], b: Sequence[str], classes: Sequence[str] = DISEASE_CODES
) -> Dict[str, float]:
    """One-vs-rest kappa for every class."""
    return {c: cohens_kappa([x == c for x in a], [y == c for y in b]) for c in classes}


def majority_vote(ratings: Sequence[Sequence[Hashable]], classes: Sequence[Hashable] = DISEASE_CODES) -> List[Hashable]:
    """Per-index modal label; ties go to the label listed first in ``classes``."""
    if len(ratings) < 3 or len(ratings) % 2 == 0:
        raise InvalidInputError(f"majority vote needs an odd number of raters >= 3, got {len(ratings)}")
    lengths = {len(series) for series in ratings}
    if len(lengths) != 1:
        raise InvalidInputError(f"rater series lengths differ: {sorted(lengths)}")
    precedence = {label: i for i, label in enumerate(classes)}
    result = []
    for votes in zip(*ratings):
        unknown = [v for v in votes if v not in precedence]
        if unknown:
            raise InvalidInputError(f"labels {unknown} are not in the class set")
        counts = Counter(votes)
        top = max(counts.values())
        result.append(min((label for label, n in counts.items() if n == top), key=precedence.__getitem__))
    return result


@dataclass
class AttributeDistribution:
    """Empirical distribution of one attribute: support points and weights."""

    kind: str
    support: List
    weights: np.ndarray

    @classmethod
    def from_samples(cls, kind: str, samples: Sequence) -> "AttributeDistribution":
        if not samples:
            raise InvalidInputError(f"empty {kind} sample")
        if kind == "age":
            values = np.asarray(samples, dtype=np.float64)
            return cls(kind, list(values), np.full(len(values), 1.0 / len(values)))
        counts = Counter(samples)
        return cls.from_pmf(kind, {label: n / len(samples) for label, n in counts.items()})

    @classmethod
    def from_pmf(cls, kind: str, pmf: Mapping[str, float]) -> "AttributeDistribution":
        if kind not in CATEGORICAL_KINDS:
            raise InvalidInputError(f"'{kind}' is not a categorical attribute")
        labels = list(pmf)
        return cls(kind, labels, np.asarray([pmf[label] for label in labels], dtype=np.float64))


def _min_max(values: np.ndarray, low: float, spread: float) -> np.ndarray:
    return (values - low) / spread


def wasserstein_gap(
    p: AttributeDistribution, q: AttributeDistribution, age_axis: Optional[tuple[float, float]] = None
) -> float:
    """1-Wasserstein distance between two distributions of the same attribute.

    Ages are min-max normalized to [0, 1] before transport, over the pooled
    support of ``p`` and ``q`` unless a shared ``age_axis`` is given; with no
    spread the gap is 0. Gaps computed on one shared axis form a metric.
    Categorical attributes use the 0/1 ground metric, i.e. total variation.
    """
    if p.kind != q.kind:
        raise InvalidInputError(f"attribute kinds differ: {p.kind} vs {q.kind}")
    if p.kind == "age":
        ages_p = np.asarray(p.support, dtype=np.float64)
        ages_q = np.asarray(q.support, dtype=np.float64)
        if age_axis is None:
            pooled = np.concatenate([ages_p, ages_q])
            age_axis = (float(pooled.min()), float(pooled.max()))
        low, spread = age_axis[0], age_axis[1] - age_axis[0]
        if spread < 0.0:
            raise InvalidInputError(f"age axis must be increasing, got {age_axis}")
        if spread == 0.0:
            return 0.0
        return float(
            ot.wasserstein_1d(_min_max(ages_p, low, spread), _min_max(ages_q, low, spread), p.weights, q.weights, p=1)
        )
    mass_p = dict(zip(p.support, p.weights))
    mass_q = dict(zip(q.support, q.weights))
    labels = set(mass_p) | set(mass_q)
    return 0.5 * float(sum(abs(mass_p.get(label, 0.0) - mass_q.get(label, 0.0)) for label in sorted(labels)))


def pairwise_distances(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # the matmul shortcut leaves identical rows a rounding error apart
    return torch.cdist(a.double(), b.double(), compute_mode="donot_use_mm_for_euclid_dist")


def matching_rate_from_embeddings(
    probes: torch.Tensor,
    probe_ids: Sequence[int],
    gallery: torch.Tensor,
    gallery_ids: Sequence[int],
    threshold: float,
) -> float:
    """Fraction of probes whose nearest gallery entry is their own identity
    and lies within ``threshold``."""
    if gallery.shape[0] == 0:
        raise EmptyGalleryError("matching needs a nonempty gallery")
    if probes.shape[0] == 0:
        return 0.0
    distances = pairwise_distances(probes, gallery)
    nearest = distances.min(dim=1)
    hits = 0
    for row, (distance, j) in enumerate(zip(nearest.values.tolist(), nearest.indices.tolist())):
        if gallery_ids[j] == probe_ids[row] and distance <= threshold:
            hits += 1
    return hits / probes.shape[0]


def matching_rate(
    probes: torch.Tensor,
    probe_ids: Sequence[int],
    gallery: torch.Tensor,
    gallery_ids: Sequence[int],
    phi: Embedder,
    threshold: float,
) -> float:
    if gallery.shape[0] == 0:
        raise EmptyGalleryError("matching needs a nonempty gallery")
    with torch.no_grad():
        return matching_rate_from_embeddings(phi(probes), probe_ids, phi(gallery), gallery_ids, threshold)


def impostor_distances(embeddings: torch.Tensor, identities: Sequence[int]) -> np.ndarray:
    """Distances of every pair with distinct identities."""
    distances = pairwise_distances(embeddings, embeddings).numpy()
    ids = np.asarray(identities)
    upper = np.triu(np.ones_like(distances, dtype=bool), k=1)
    return distances[upper & (ids[:, None] != ids[None, :])]


def calibrate_threshold(impostor: Sequence[float] | np.ndarray, rate: float) -> float:
    """Distance below which a fraction ``rate`` of impostor pairs fall."""
    values = np.asarray(impostor, dtype=np.float64)
    if values.size == 0:
        raise InvalidInputError("cannot calibrate on an empty impostor set")
    if not 0.0 <= rate <= 1.0:
        raise InvalidInputError(f"rate must be in [0, 1], got {rate}")
    return float(np.quantile(values, rate))


@dataclass
class UtilityAccuracy:
    overall: float
    per_class: Dict[str, float]


def accuracy_from_predictions(predictions: Sequence[str], labels: Sequence[str]) -> UtilityAccuracy:
    if len(predictions) != len(labels):
        raise InvalidInputError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise InvalidInputError("no labels to score")
    per_class = {}
    for cls in _label_order(set(labels), DISEASE_CODES):
        idx = [i for i, label in enumerate(labels) if label == cls]
        per_class[cls] = sum(predictions[i] == cls for i in idx) / len(idx)
    overall = sum(p == l for p, l in zip(predictions, labels)) / len(labels)
    return UtilityAccuracy(overall=overall, per_class=per_class)


def utility_accuracy(
    images: torch.Tensor, labels: Sequence[str], plugin: Optional[ClassifierPlugin]
) -> Optional[UtilityAccuracy]:
    """Top-1 accuracy of a classifier plugin, or None when none is loaded."""
    if plugin is None:
        return None
    return accuracy_from_predictions(plugin.predict(images), labels)
