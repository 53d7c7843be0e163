"""Corpus records, target distributions and the JSON-lines manifest."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import jsonschema

from ..errors import ConfigError, ManifestError
from ..labels import DISEASE_CODES, GENDERS, SEVERITIES, SPLIT_SIZES, SPLITS

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_NAME = "medsem-manifest"
MANIFEST_VERSION = 1
INJECTION_RANGE = (0.2, 0.4)
PMF_TOLERANCE = 1e-9

RECORD_SCHEMA: Dict = {
    "type": "object",
    "required": [
        "sample_id",
        "disease",
        "severity",
        "age",
        "gender",
        "injection_weight",
        "reference_id",
        "prompt",
        "split",
        "file_path",
        "leakage_distance",
    ],
    "additionalProperties": False,
    "properties": {
        "sample_id": {"type": "string", "minLength": 1},
        "disease": {"enum": list(DISEASE_CODES)},
        "severity": {"enum": list(SEVERITIES)},
        "age": {"type": "number", "minimum": 0},
        "gender": {"enum": list(GENDERS)},
        "injection_weight": {
            "type": "number",
            "minimum": INJECTION_RANGE[0],
            "maximum": INJECTION_RANGE[1],
        },
        "reference_id": {"type": ["string", "null"]},
        "prompt": {"type": "string"},
        "split": {"enum": list(SPLITS)},
        "file_path": {"type": "string"},
        "leakage_distance": {"type": "number", "minimum": 0},
    },
}


@dataclass(frozen=True)
class SampleRecord:
    """One generated corpus sample.

    Severity is generation metadata taken from the prompt, not a verified
    label.
    """

    sample_id: str
    disease: str
    severity: str
    age: float
    gender: str
    injection_weight: float
    reference_id: Optional[str]
    prompt: str
    split: str
    file_path: str
    leakage_distance: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)


@dataclass(frozen=True)
class ReferenceFace:
    """A public face used for attribute injection."""

    face_id: str
    path: str
    age: float
    gender: str


def _normalized_pmf(pmf: Dict[str, float], allowed: Iterable[str], key: str) -> Dict[str, float]:
    allowed = list(allowed)
    unknown = sorted(set(pmf) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown categories {unknown}", key=key)
    if any(value < 0 for value in pmf.values()):
        raise ConfigError("probabilities must be >= 0", key=key)
    if abs(sum(pmf.values()) - 1.0) > PMF_TOLERANCE:
        raise ConfigError(f"probabilities sum to {sum(pmf.values())}, not 1", key=key)
    return {label: float(pmf.get(label, 0.0)) for label in allowed}


@dataclass
class TargetDistributions:
    """Real-patient attribute distributions a generated corpus should follow."""

    disease: Dict[str, float]
    gender: Dict[str, float]
    ages: List[float]

    def __post_init__(self) -> None:
        self.disease = _normalized_pmf(self.disease, DISEASE_CODES, "forge.targets.disease")
        self.gender = _normalized_pmf(self.gender, GENDERS, "forge.targets.gender")
        if not self.ages:
            raise ConfigError("at least one age is required", key="forge.targets.ages")
        self.ages = [float(age) for age in self.ages]

    @classmethod
    def uniform(cls, ages: Iterable[float]) -> "TargetDistributions":
        return cls(
            disease={code: 1.0 / len(DISEASE_CODES) for code in DISEASE_CODES},
            gender={gender: 1.0 / len(GENDERS) for gender in GENDERS},
            ages=list(ages),
        )


def assign_split(sample_id: str, seed: int) -> str:
    """Hash-based split with the corpus ratios; stable for a given (id, seed)."""
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode()).digest()
    u = int.from_bytes(digest[:8], "little") / 2**64
    total = sum(SPLIT_SIZES.values())
    cumulative = 0.0
    for split in SPLITS:
        cumulative += SPLIT_SIZES[split] / total
        if u < cumulative:
            return split
    return SPLITS[-1]


def manifest_header() -> str:
    return json.dumps({"schema": MANIFEST_SCHEMA_NAME, "version": MANIFEST_VERSION}, sort_keys=True)


class ManifestWriter:
    """Append-only manifest; each record is written as one complete line."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.write_text(manifest_header() + "\n", encoding="utf-8")
        else:
            _check_header(self.path, self.path.read_text(encoding="utf-8").splitlines()[0])

    def append(self, record: SampleRecord) -> None:
        jsonschema.validate(asdict(record), RECORD_SCHEMA)
        with self.path.open("a", encoding="utf-8") as f:
            f.write(record.to_json() + "\n")
            f.flush()


def _check_header(path: Path, line: str) -> None:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:1: header is not JSON") from exc
    if header.get("schema") != MANIFEST_SCHEMA_NAME:
        raise ManifestError(f"{path}:1: not a {MANIFEST_SCHEMA_NAME} file")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}:1: unsupported manifest version {header.get('version')}")


def read_manifest(path: str | Path) -> List[SampleRecord]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    _check_header(path, lines[0])
    names = {f.name for f in fields(SampleRecord)}
    records = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            jsonschema.validate(data, RECORD_SCHEMA)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{number}: invalid JSON") from exc
        except jsonschema.ValidationError as exc:
            raise ManifestError(f"{path}:{number}: {exc.message}") from exc
        records.append(SampleRecord(**{k: v for k, v in data.items() if k in names}))
    return records


def write_manifest(path: str | Path, records: Iterable[SampleRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = "".join(record.to_json() + "\n" for record in records)
    path.write_text(manifest_header() + "\n" + body, encoding="utf-8")


def write_review_queue(records: Iterable[SampleRecord], path: str | Path) -> int:
    """CSV of (sample_id, file_path) for manual quality review."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "file_path"])
        for record in records:
            writer.writerow([record.sample_id, record.file_path])
            count += 1
    return count


def read_accept_list(path: str | Path) -> set[str]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"accept list not found: {path}")
    return {line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()}


def apply_accept_list(
    manifest: str | Path, accept_list: str | Path, output: str | Path
) -> tuple[int, int]:
    """Keep only accepted records; splits are copied unchanged. Returns (kept, dropped)."""
    records = read_manifest(manifest)
    accepted = read_accept_list(accept_list)
    unknown = accepted - {record.sample_id for record in records}
    if unknown:
        logger.warning("%d accepted ids are not in the manifest", len(unknown))
    kept = [record for record in records if record.sample_id in accepted]
    write_manifest(output, kept)
    return len(kept), len(records) - len(kept)
