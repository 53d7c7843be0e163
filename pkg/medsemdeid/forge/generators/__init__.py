"""Generator clients."""

from .base import GeneratorClient
from .http import HttpGeneratorClient
from .stub import EchoGalleryClient, NoiseClient

__all__ = ["GeneratorClient", "HttpGeneratorClient", "EchoGalleryClient", "NoiseClient"]
