"""Face corpora: manifest-backed images and procedurally drawn synthetic faces.

Both datasets return ``FaceSample`` items; ``collate`` stacks them into a
``FaceBatch``. Every item is a pure function of its index (and seed), which
the trainer relies on for reproducible data order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .errors import DataError
from .forge.records import SampleRecord, read_manifest
from .labels import DISEASE_CODES, LESION_COLORS
from .tensors import load_image, to_model_range

logger = logging.getLogger(__name__)


@dataclass
class FaceSample:
    image: torch.Tensor  # [3, H, W] in [-1, 1]
    identity: int
    label: str
    mask: Optional[torch.Tensor] = None  # [H, W] bool


@dataclass
class FaceBatch:
    images: torch.Tensor
    identities: torch.Tensor
    labels: List[str]
    masks: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.images.shape[0]


def collate(samples: Sequence[FaceSample]) -> FaceBatch:
    masks = None
    if samples and all(sample.mask is not None for sample in samples):
        masks = torch.stack([sample.mask for sample in samples])
    return FaceBatch(
        images=torch.stack([sample.image for sample in samples]),
        identities=torch.tensor([sample.identity for sample in samples], dtype=torch.long),
        labels=[sample.label for sample in samples],
        masks=masks,
    )


def _rgb(rng: np.random.Generator, low: int, high: int) -> tuple[int, int, int]:
    return tuple(int(v) for v in rng.integers(low, high, size=3))


def _gray(rng: np.random.Generator, low: int, high: int) -> tuple[int, int, int]:
    v = int(rng.integers(low, high))
    return (v, v, v)


class SyntheticFaces:
    """Identity-bearing toy faces with an optional colored lesion patch.

    Identity sets skin tone, face outline, eye geometry and a forehead
    polygon. Everything but the skin and the lesion is gray so lesion colors
    stay unambiguous. Each sample adds a disease label, a lesion near one eye
    and a small positional jitter. Labels cycle through the disease classes so any
    multiple of eight samples is class-balanced.
    """

    def __init__(self, n_samples: int, n_identities: int = 16, image_size: int = 64, seed: int = 0) -> None:
        if n_samples < 1 or n_identities < 1:
            raise DataError("synthetic corpus needs at least one sample and one identity")
        self.n_samples = n_samples
        self.n_identities = n_identities
        self.image_size = image_size
        self.seed = seed
        self._cache: dict[int, FaceSample] = {}

    def __len__(self) -> int:
        return self.n_samples

    def identity_of(self, index: int) -> int:
        return index % self.n_identities

    def __getitem__(self, index: int) -> FaceSample:
        if not 0 <= index < self.n_samples:
            raise IndexError(index)
        if index not in self._cache:
            self._cache[index] = self._draw(index)
        return self._cache[index]

    def _draw(self, index: int) -> FaceSample:
        s = self.image_size
        identity = self.identity_of(index)
        who = np.random.default_rng([self.seed, identity])
        what = np.random.default_rng([self.seed, identity, index])
        label = DISEASE_CODES[index % len(DISEASE_CODES)]

        image = Image.new("RGB", (s, s), _gray(who, 20, 90))
        mask = Image.new("L", (s, s), 0)
        draw = ImageDraw.Draw(image)
        dx, dy = (int(v) for v in what.integers(-1, 2, size=2))

        margin_x, margin_y = (int(v * s) for v in who.uniform(0.08, 0.18, size=2))
        draw.ellipse([margin_x + dx, margin_y + dy, s - margin_x + dx, s - margin_y + dy], fill=_rgb(who, 150, 235))

        top = int(s * who.uniform(0.16, 0.24))
        polygon = [
            (s / 2 + dx + s * 0.16 * np.cos(a), top + dy + s * 0.08 * np.sin(a))
            for a in np.sort(who.uniform(0, 2 * np.pi, size=int(who.integers(3, 7))))
        ]
        draw.polygon(polygon, fill=_gray(who, 0, 256))

        eye_y = int(s * who.uniform(0.38, 0.46)) + dy
        spacing = int(s * who.uniform(0.14, 0.22))
        radius = max(2, int(s * who.uniform(0.04, 0.07)))
        iris = _gray(who, 0, 200)
        eyes = [(s // 2 - spacing + dx, eye_y), (s // 2 + spacing + dx, eye_y)]
        for cx, cy in eyes:
            draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=(245, 245, 245))
            draw.ellipse([cx - radius // 2, cy - radius // 2, cx + radius // 2, cy + radius // 2], fill=iris)

        mouth_y = int(s * who.uniform(0.68, 0.76)) + dy
        half = int(s * who.uniform(0.08, 0.16))
        draw.line([(s // 2 - half + dx, mouth_y), (s // 2 + half + dx, mouth_y)], fill=_gray(who, 80, 160), width=2)

        if label in LESION_COLORS:
            cx, cy = eyes[int(what.integers(0, 2))]
            cy += int(radius * what.uniform(1.2, 1.8))
            r = max(2, int(s * what.uniform(0.05, 0.08)))
            box = [cx - r, cy - r, cx + r, cy + r]
            draw.ellipse(box, fill=LESION_COLORS[label])
            ImageDraw.Draw(mask).ellipse(box, fill=255)

        array = np.asarray(image, dtype=np.float32) / 255.0
        x = to_model_range(torch.from_numpy(array).permute(2, 0, 1).contiguous())
        return FaceSample(
            image=x,
            identity=identity,
            label=label,
            mask=torch.from_numpy(np.asarray(mask) > 0),
        )


class ManifestDataset:
    """Images listed in a forge manifest, optionally restricted to one split.

    Paths are resolved relative to the manifest's directory. Generated
    samples are distinct identities, so a sample's identity is its position.
    """

    def __init__(self, manifest: str | Path, split: Optional[str] = None, image_size: Optional[int] = None) -> None:
        self.manifest = Path(manifest)
        self.root = self.manifest.parent
        records = read_manifest(self.manifest)
        self.records: List[SampleRecord] = [r for r in records if split is None or r.split == split]
        self.image_size = image_size
        logger.info("%s: %d records (split=%s)", self.manifest, len(self.records), split or "all")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> FaceSample:
        record = self.records[index]
        path = Path(record.file_path)
        if not path.is_absolute():
            path = self.root / path
        try:
            image = load_image(path, size=self.image_size)
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        return FaceSample(image=image, identity=index, label=record.disease)
