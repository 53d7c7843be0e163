"""Deterministic offline generator clients."""
from __future__ import annotations

import zlib
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from ...errors import GeneratorError
from ..planner import GenerationRequest
from .base import GeneratorClient


def _key(sample_id: str) -> int:
    return zlib.crc32(sample_id.encode("utf-8"))


class EchoGalleryClient(GeneratorClient):
    """Returns a gallery image, optionally with light noise: a planted leak."""

    name = "echo"

    def __init__(self, gallery: Sequence[Image.Image], noise_std: float = 0.0, seed: int = 0) -> None:
        if not gallery:
            raise GeneratorError("echo client needs at least one gallery image")
        self.gallery = [image.convert("RGB") for image in gallery]
        self.noise_std = noise_std
        self.seed = seed

    def pick(self, request: GenerationRequest) -> int:
        return _key(request.sample_id) % len(self.gallery)

    async def generate(
        self, request: GenerationRequest, reference: Optional[Image.Image], attempt: int = 0
    ) -> Image.Image:
        image = self.gallery[self.pick(request)]
        if self.noise_std <= 0:
            return image.copy()
        rng = np.random.default_rng([self.seed, _key(request.sample_id), attempt])
        array = np.asarray(image, dtype=np.float32)
        array = array + rng.normal(0.0, self.noise_std * 255.0, size=array.shape)
        return Image.fromarray(np.clip(array, 0, 255).round().astype(np.uint8))


class NoiseClient(GeneratorClient):
    """Seeded uniform noise images, far from any face identity."""

    name = "noise"

    def __init__(self, image_size: int = 64, seed: int = 0) -> None:
        self.image_size = image_size
        self.seed = seed

    async def generate(
        self, request: GenerationRequest, reference: Optional[Image.Image], attempt: int = 0
    ) -> Image.Image:
        rng = np.random.default_rng([self.seed, _key(request.sample_id), attempt])
        array = rng.integers(0, 256, size=(self.image_size, self.image_size, 3), dtype=np.uint8)
        return Image.fromarray(array)
