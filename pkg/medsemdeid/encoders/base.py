"""Frozen medical-semantics encoder interface and backend registry."""
from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional

import torch
from torch import nn

from ..errors import ConfigError, ShapeMismatchError, UnknownBackendError
from ..tensors import MED_CHANNELS, MED_STRIDE, as_batch, check_image


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class MedicalEncoder(nn.Module, ABC):
    """Base class for Enc_med backends.

    Subclasses build their network in ``load`` and map it to a
    [B, 320, H/16, W/16] feature in ``_features``. After ``load`` every
    parameter is frozen and the module stays in eval mode.
    """

    backend_id: str = "encoder"
    description: str = ""

    def __init__(self, image_size: int, seed: int = 0) -> None:
        super().__init__()
        self.image_size = image_size
        self.seed = seed
        self.loaded = False
        self._metadata: Dict[str, Any] = {"backend": self.backend_id}

    @abstractmethod
    def _build(self, weights: Optional[str]) -> Dict[str, Any]:
        """Construct (and optionally load) the backend network; return metadata."""
        raise NotImplementedError

    @abstractmethod
    def _features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def load(self, weights: Optional[str] = None) -> "MedicalEncoder":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            metadata = self._build(weights)
        for param in self.parameters():
            param.requires_grad_(False)
        super().train(False)
        self.loaded = True
        self._metadata.update(metadata)
        self._metadata["weights"] = weights or f"random:{self.seed}"
        self._metadata["checksum"] = self.checksum()
        return self

    def train(self, mode: bool = True) -> "MedicalEncoder":
        # Frozen: never leaves eval mode.
        return super().train(False)

    @property
    def metadata(self) -> Dict[str, Any]:
        return dict(self._metadata)

    def checksum(self) -> str:
        return parameter_checksum(self)

    def extract(self, x: torch.Tensor) -> torch.Tensor:
        if not self.loaded:
            raise ConfigError(f"medical encoder backend '{self.backend_id}' is not loaded")
        check_image(x, check_range=False)
        xb, added = as_batch(x, 4)
        feature = self._features(xb)
        expected = (xb.shape[0], MED_CHANNELS, xb.shape[-2] // MED_STRIDE, xb.shape[-1] // MED_STRIDE)
        if tuple(feature.shape) != expected:
            raise ShapeMismatchError(f"{self.backend_id} produced {tuple(feature.shape)}, expected {expected}")
        return feature[0] if added else feature


class BackendRegistry:
    """Registry for medical encoder backends."""

    def __init__(self) -> None:
        self.backends: Dict[str, type[MedicalEncoder]] = {}

    def register(self, backend: type[MedicalEncoder]) -> None:
        self.backends[backend.backend_id] = backend

    def get(self, backend_id: str) -> Optional[type[MedicalEncoder]]:
        return self.backends.get(backend_id)

    def list(self) -> List[str]:
        return list(self.backends.keys())


registry = BackendRegistry()


def load_backend(
    backend_id: str,
    weights: Optional[str] = None,
    *,
    image_size: int = 128,
    seed: int = 0,
    **options: Any,
) -> MedicalEncoder:
    """Instantiate and load a registered backend."""
    backend = registry.get(backend_id)
    if backend is None:
        raise UnknownBackendError(
            f"unknown medical encoder backend '{backend_id}' (known: {', '.join(registry.list())})",
            key="med_encoder.backend",
        )
    return backend(image_size=image_size, seed=seed, **options).load(weights)
