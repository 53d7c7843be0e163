"""Generator client interface."""
from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Optional

from PIL import Image

from ..planner import GenerationRequest


class GeneratorClient(ABC):
    """Conditional image generation service.

    Clients are stateless per request: the output depends only on the
    request, the reference face and the attempt number.
    """

    name: str = "client"

    @abstractmethod
    async def generate(
        self, request: GenerationRequest, reference: Optional[Image.Image], attempt: int = 0
    ) -> Image.Image:
        """Return one generated face for ``request``.

        ``attempt`` counts regenerations after a leakage rejection.
        """
        raise NotImplementedError

    async def close(self) -> None:
        return None
