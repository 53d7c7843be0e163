"""Benchmark protocol: run a codec over a corpus and aggregate an EvalReport.

Absent plugins yield absent report fields, never zeros.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import jsonschema
import numpy as np
import torch

from .codec import FeatureExtractor, MedSemCodec
from .data import collate
from .errors import InvalidInputError, ManifestError
from .forge.records import SampleRecord, TargetDistributions
from .identity import IdentityEmbedder
from .metrics import (
    ATTRIBUTE_KINDS,
    AttributeDistribution,
    accuracy_from_predictions,
    calibrate_threshold,
    cohens_kappa,
    dice,
    id_dis,
    impostor_distances,
    jaccard,
    majority_vote,
    matching_rate_from_embeddings,
    per_class_kappa,
    psnr,
    wasserstein_gap,
)
from .objective import feature_mse, identity_cosine
from .passwords import sample_passwords, sample_wrong_passwords
from .plugins.base import ClassifierPlugin, PerceptualPlugin, SegmenterPlugin
from .tensors import to_unit_range

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

_score_map = {"type": "object", "additionalProperties": {"type": "number"}}

REPORT_SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "medsemdeid evaluation report",
    "type": "object",
    "required": ["schema_version", "samples", "id_dis"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "samples": {"type": "integer", "minimum": 0},
        "id_dis": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 2.0001}},
        "psnr": {"oneOf": [{"type": "number"}, {"const": "inf"}]},
        "psnr_wrong": {"oneOf": [{"type": "number"}, {"const": "inf"}]},
        "perceptual": {"type": "number", "minimum": 0},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "accuracy_per_class": _score_map,
        "dice": {"type": "number", "minimum": 0, "maximum": 1},
        "jaccard": {"type": "number", "minimum": 0, "maximum": 1},
        "kappa": {"type": "number"},
        "kappa_per_class": _score_map,
        "matching_rate": {"type": "number", "minimum": 0, "maximum": 1},
        "matching_threshold": {"type": "number", "minimum": 0},
        "wasserstein": {
            "type": "object",
            "propertyNames": {"enum": list(ATTRIBUTE_KINDS)},
            "additionalProperties": {"type": "number", "minimum": 0},
        },
    },
}


@dataclass
class EvalReport:
    samples: int
    id_dis: Dict[str, float] = field(default_factory=dict)
    psnr: Optional[float] = None
    psnr_wrong: Optional[float] = None
    perceptual: Optional[float] = None
    accuracy: Optional[float] = None
    accuracy_per_class: Optional[Dict[str, float]] = None
    dice: Optional[float] = None
    jaccard: Optional[float] = None
    kappa: Optional[float] = None
    kappa_per_class: Optional[Dict[str, float]] = None
    matching_rate: Optional[float] = None
    matching_threshold: Optional[float] = None
    wasserstein: Optional[Dict[str, float]] = None
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> Dict[str, Any]:
        data = {key: value for key, value in asdict(self).items() if value is not None}
        for key in ("psnr", "psnr_wrong"):
            if key in data and math.isinf(data[key]):
                data[key] = "inf"
        return data

    def to_json(self) -> str:
        data = self.to_dict()
        jsonschema.validate(data, REPORT_SCHEMA)
        return json.dumps(data, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        jsonschema.validate(data, REPORT_SCHEMA)
        for key in ("psnr", "psnr_wrong"):
            if data.get(key) == "inf":
                data[key] = math.inf
        return cls(**data)


def format_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned plain-text table with a dashed rule under the header."""
    widths = [max([len(h)] + [len(row[i]) for row in rows]) for i, h in enumerate(headers)]

    def line(cells: Sequence[str]) -> str:
        return "  ".join(cell.ljust(width) for cell, width in zip(cells, widths)).rstrip()

    lines = [line(headers), line(["-" * width for width in widths])]
    lines += [line(row) for row in rows]
    return "\n".join(lines) + "\n"


def _num(value: float, digits: int = 4) -> str:
    return "inf" if math.isinf(value) else f"{value:.{digits}f}"


def _pct(value: float) -> str:
    return f"{100 * value:.2f}%"


def render_table(report: EvalReport) -> str:
    rows: List[List[str]] = [["Samples", str(report.samples)]]
    rows += [[f"ID-Dis [{name}]", _num(value)] for name, value in report.id_dis.items()]
    if report.psnr is not None:
        rows.append(["PSNR (dB)", _num(report.psnr, 2)])
    if report.psnr_wrong is not None:
        rows.append(["PSNR wrong password (dB)", _num(report.psnr_wrong, 2)])
    if report.perceptual is not None:
        rows.append(["Perceptual distance", _num(report.perceptual)])
    if report.accuracy is not None:
        rows.append(["Accuracy (overall)", _pct(report.accuracy)])
    for name, value in (report.accuracy_per_class or {}).items():
        rows.append([f"Accuracy [{name}]", _pct(value)])
    if report.dice is not None:
        rows.append(["Dice", _num(report.dice)])
    if report.jaccard is not None:
        rows.append(["Jaccard", _num(report.jaccard)])
    if report.kappa is not None:
        rows.append(["Kappa", _num(report.kappa)])
    for name, value in (report.kappa_per_class or {}).items():
        rows.append([f"Kappa [{name}]", _num(value)])
    if report.matching_rate is not None:
        rows.append(["Matching rate", _pct(report.matching_rate)])
    if report.matching_threshold is not None:
        rows.append(["Matching threshold", _num(report.matching_threshold)])
    gaps = report.wasserstein or {}
    rows += [[f"W-gap [{kind}]", _num(gaps[kind], 3)] for kind in ATTRIBUTE_KINDS if kind in gaps]
    return format_table(["Metric", "Value"], rows)


@dataclass
class CodecProbe:
    """Directional quantities for one batch: identity distances, cosines,
    medical-feature distance and recovery PSNR."""

    id_dis_enc: float
    id_dis_hat: float
    cos_hat: float
    cos_wrong: float
    med_distance: float
    psnr_right: float
    psnr_wrong: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


@torch.no_grad()
def probe_codec(
    codec: MedSemCodec,
    enc_med: FeatureExtractor,
    phi: IdentityEmbedder,
    x: torch.Tensor,
    p: torch.Tensor,
    p_wrong: torch.Tensor,
) -> CodecProbe:
    f_med = enc_med.extract(x)
    out = codec.forward_train(x, p, p_wrong, f_med)
    return CodecProbe(
        id_dis_enc=float(id_dis(x, out.x_enc, phi).mean()),
        id_dis_hat=float(id_dis(x, out.x_hat, phi).mean()),
        cos_hat=float(identity_cosine(phi(x), phi(out.x_hat))),
        cos_wrong=float(identity_cosine(phi(x), phi(out.x_wrong))),
        med_distance=float(feature_mse(enc_med.extract(out.x_enc), f_med)),
        psnr_right=psnr(to_unit_range(x), to_unit_range(out.x_hat)),
        psnr_wrong=psnr(to_unit_range(x), to_unit_range(out.x_wrong)),
    )


def read_ratings(path: str | Path) -> tuple[List[str], List[List[str]]]:
    """CSV with a ``sample_id`` column and one column per rater."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"ratings file not found: {path}")
    with path.open(encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or "sample_id" not in rows[0]:
        raise ManifestError(f"{path}: expected a sample_id column and rater columns")
    raters = [name for name in rows[0] if name != "sample_id"]
    return [row["sample_id"] for row in rows], [[row[name] for row in rows] for name in raters]


def rater_consistency(original: Sequence[Sequence[str]], deidentified: Sequence[Sequence[str]]) -> tuple[float, Dict[str, float]]:
    """Kappa between the majority diagnoses on original and de-identified images."""
    before = majority_vote(original)
    after = majority_vote(deidentified)
    return cohens_kappa(before, after), per_class_kappa(before, after)


def distribution_gaps(records: Sequence[SampleRecord], targets: TargetDistributions) -> Dict[str, float]:
    if not records:
        raise InvalidInputError("no records to compare against targets")
    return {
        "disease": wasserstein_gap(
            AttributeDistribution.from_samples("disease", [r.disease for r in records]),
            AttributeDistribution.from_pmf("disease", targets.disease),
        ),
        "age": wasserstein_gap(
            AttributeDistribution.from_samples("age", [r.age for r in records]),
            AttributeDistribution.from_samples("age", targets.ages),
        ),
        "gender": wasserstein_gap(
            AttributeDistribution.from_samples("gender", [r.gender for r in records]),
            AttributeDistribution.from_pmf("gender", targets.gender),
        ),
    }


@torch.no_grad()
def evaluate(
    codec: MedSemCodec,
    enc_med: FeatureExtractor,
    embedders: Mapping[str, IdentityEmbedder],
    dataset: Sequence,
    *,
    seed: int = 0,
    batch_size: int = 8,
    classifier: Optional[ClassifierPlugin] = None,
    segmenter: Optional[SegmenterPlugin] = None,
    perceptual: Optional[PerceptualPlugin] = None,
    matching_threshold: Optional[float] = None,
    false_accept_rate: float = 0.01,
    ratings: Optional[tuple[Sequence[Sequence[str]], Sequence[Sequence[str]]]] = None,
    wasserstein: Optional[Dict[str, float]] = None,
) -> EvalReport:
    """Evaluate a codec snapshot batch by batch in corpus order.

    Passwords for batch ``i`` come from ``default_rng([seed, i])``; the first
    embedder in ``embedders`` drives the matching-rate measurement.
    """
    if not embedders:
        raise InvalidInputError("at least one identity embedder is required")
    n = len(dataset)
    if n == 0:
        raise InvalidInputError("evaluation corpus is empty")
    primary = next(iter(embedders))
    distances: Dict[str, List[float]] = {name: [] for name in embedders}
    psnr_right: List[float] = []
    psnr_wrong: List[float] = []
    perceptual_values: List[float] = []
    predictions: List[str] = []
    labels: List[str] = []
    dice_values: List[float] = []
    jaccard_values: List[float] = []
    gallery, probes, identities = [], [], []

    for batch_index, start in enumerate(range(0, n, batch_size)):
        batch = collate([dataset[i] for i in range(start, min(start + batch_size, n))])
        x = batch.images
        rng = np.random.default_rng([seed, batch_index])
        p = sample_passwords(rng, len(batch))
        p_wrong = sample_wrong_passwords(rng, p)
        out = codec.forward_train(x, p, p_wrong, enc_med.extract(x))

        for name, phi in embedders.items():
            distances[name] += id_dis(x, out.x_enc, phi).tolist()
        unit_x = to_unit_range(x)
        for i in range(len(batch)):
            psnr_right.append(psnr(unit_x[i], to_unit_range(out.x_hat[i])))
            psnr_wrong.append(psnr(unit_x[i], to_unit_range(out.x_wrong[i])))
        if perceptual is not None:
            perceptual_values += perceptual.distance(x, out.x_hat).tolist()
        if classifier is not None:
            predictions += classifier.predict(out.x_enc, batch.labels)
        labels += batch.labels
        if segmenter is not None:
            reference = batch.masks if batch.masks is not None else segmenter.segment(x)
            for truth, predicted in zip(reference, segmenter.segment(out.x_enc)):
                dice_values.append(dice(truth, predicted))
                jaccard_values.append(jaccard(truth, predicted))
        gallery.append(embedders[primary](x))
        probes.append(embedders[primary](out.x_enc))
        identities += batch.identities.tolist()

    report = EvalReport(samples=n, id_dis={name: float(np.mean(values)) for name, values in distances.items()})
    report.psnr = float(np.mean(psnr_right))
    report.psnr_wrong = float(np.mean(psnr_wrong))
    if perceptual_values:
        report.perceptual = float(np.mean(perceptual_values))
    if classifier is not None:
        accuracy = accuracy_from_predictions(predictions, labels)
        report.accuracy, report.accuracy_per_class = accuracy.overall, accuracy.per_class
    if segmenter is not None:
        report.dice = float(np.mean(dice_values))
        report.jaccard = float(np.mean(jaccard_values))
    if ratings is not None:
        report.kappa, report.kappa_per_class = rater_consistency(*ratings)

    gallery_emb = torch.cat(gallery)
    threshold = matching_threshold
    if threshold is None:
        impostor = impostor_distances(gallery_emb, identities)
        if impostor.size:
            threshold = calibrate_threshold(impostor, false_accept_rate)
    if threshold is not None:
        report.matching_threshold = float(threshold)
        report.matching_rate = matching_rate_from_embeddings(
            torch.cat(probes), identities, gallery_emb, identities, threshold
        )
    report.wasserstein = wasserstein
    logger.info("evaluated %d samples", n)
    return report
