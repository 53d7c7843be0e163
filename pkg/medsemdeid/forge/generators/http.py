"""Generator client for an HTTP image-generation service."""
from __future__ import annotations

import asyncio
import base64
import io
import logging
from typing import Any, Dict, Optional

import requests
from PIL import Image

from ...errors import GeneratorError
from ..planner import GenerationRequest
from .base import GeneratorClient

logger = logging.getLogger(__name__)


def encode_png(image: Image.Image) -> str:
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def decode_png(data: str) -> Image.Image:
    try:
        image = Image.open(io.BytesIO(base64.b64decode(data)))
        image.load()
    except (ValueError, OSError) as exc:
        raise GeneratorError(f"service returned an undecodable image: {exc}") from exc
    return image.convert("RGB")


class HttpGeneratorClient(GeneratorClient):
    """POSTs JSON requests with base64 PNG images.

    Request body: ``prompt``, ``injection_weight``, ``reference_image`` (or
    null), ``sample_id`` and ``attempt``. Response body: ``{"image": <b64 png>}``.
    """

    name = "http"

    def __init__(
        self,
        endpoint: str,
        timeout: float = 60.0,
        retries: int = 3,
        token: Optional[str] = None,
    ) -> None:
        if not endpoint:
            raise GeneratorError("http generator requires an endpoint")
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = max(1, retries)
        self.headers = {"Content-Type": "application/json"}
        if token:
            self.headers["Authorization"] = f"Bearer {token}"

    def body(self, request: GenerationRequest, reference: Optional[Image.Image], attempt: int) -> Dict[str, Any]:
        return {
            "sample_id": request.sample_id,
            "prompt": request.prompt,
            "injection_weight": request.injection_weight,
            "reference_image": encode_png(reference) if reference is not None else None,
            "attempt": attempt,
        }

    def _post(self, body: Dict[str, Any]) -> Image.Image:
        response = requests.post(self.endpoint, json=body, headers=self.headers, timeout=self.timeout)
        response.raise_for_status()
        payload = response.json()
        if "image" not in payload:
            raise GeneratorError("service response has no 'image' field")
        return decode_png(payload["image"])

    async def generate(
        self, request: GenerationRequest, reference: Optional[Image.Image], attempt: int = 0
    ) -> Image.Image:
        body = self.body(request, reference, attempt)
        last_exc: Exception | None = None
        for retry in range(self.retries):
            try:
                return await asyncio.to_thread(self._post, body)
            except (requests.RequestException, ValueError, GeneratorError) as exc:
                last_exc = exc
                logger.debug("%s: attempt %d failed: %s", request.sample_id, retry + 1, exc)
                if retry < self.retries - 1:
                    await asyncio.sleep(2 ** retry)
        raise GeneratorError(
            f"generation of {request.sample_id} failed after {self.retries} attempts: {last_exc}"
        ) from last_exc
