"""Public reference faces and the attribute estimator that labels them."""
from __future__ import annotations

import hashlib
import json
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional

from PIL import Image

from ..errors import DataError, ManifestError, UnknownBackendError
from ..labels import GENDERS
from .records import ReferenceFace

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class AttributeEstimator(ABC):
    """Estimates (age, gender) for a face image."""

    name: str = "estimator"

    @abstractmethod
    def estimate(self, image: Image.Image) -> tuple[float, str]:
        raise NotImplementedError


class StubEstimator(AttributeEstimator):
    """Deterministic pseudo-estimates derived from the pixel content."""

    name = "stub"

    def estimate(self, image: Image.Image) -> tuple[float, str]:
        digest = hashlib.sha256(image.convert("RGB").tobytes()).digest()
        age = 20.0 + digest[0] % 61
        gender = GENDERS[digest[1] % len(GENDERS)]
        return age, gender


_ESTIMATORS: Dict[str, type[AttributeEstimator]] = {StubEstimator.name: StubEstimator}


def load_estimator(name: str, **options: Any) -> AttributeEstimator:
    estimator = _ESTIMATORS.get(name)
    if estimator is None:
        raise UnknownBackendError(
            f"unknown attribute estimator '{name}' (known: {', '.join(_ESTIMATORS)})", key="forge.estimator"
        )
    return estimator(**options)


def _open(path: Path) -> Image.Image:
    try:
        with Image.open(path) as image:
            return image.convert("RGB")
    except OSError as exc:
        raise DataError(f"cannot read reference face {path}: {exc}") from exc


def load_references(source: str | Path, estimator: Optional[AttributeEstimator] = None) -> List[ReferenceFace]:
    """Read reference faces from a directory of images or a JSON-lines index.

    Index lines hold ``face_id`` and ``path`` and optionally ``age`` and
    ``gender``; missing attributes (and every image of a directory) are
    filled in by ``estimator``.
    """
    source = Path(source)
    estimator = estimator or StubEstimator()
    if source.is_dir():
        entries: List[Dict[str, Any]] = [
            {"face_id": path.stem, "path": path.name}
            for path in sorted(source.iterdir())
            if path.suffix.lower() in IMAGE_SUFFIXES
        ]
        root = source
    elif source.is_file():
        entries = []
        for number, line in enumerate(source.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{source}:{number}: invalid JSON") from exc
            if "face_id" not in entry or "path" not in entry:
                raise ManifestError(f"{source}:{number}: 'face_id' and 'path' are required")
            entries.append(entry)
        root = source.parent
    else:
        raise DataError(f"reference source not found: {source}")

    faces = []
    for entry in entries:
        path = Path(entry["path"])
        if not path.is_absolute():
            path = root / path
        age, gender = entry.get("age"), entry.get("gender")
        if age is None or gender is None:
            est_age, est_gender = estimator.estimate(_open(path))
            age = est_age if age is None else age
            gender = est_gender if gender is None else gender
        if gender not in GENDERS:
            raise ManifestError(f"{source}: reference '{entry['face_id']}' has unknown gender '{gender}'")
        faces.append(ReferenceFace(face_id=str(entry["face_id"]), path=str(path), age=float(age), gender=gender))
    logger.info("loaded %d reference faces from %s", len(faces), source)
    return faces
