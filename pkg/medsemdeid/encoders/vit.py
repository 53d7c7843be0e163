"""Vision-transformer backends (supervised and masked-autoencoder weights).

Patch tokens at stride 16 are reshaped to a grid and a frozen linear adapter
maps the backbone width to the 320 medical channels.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, Optional

import timm
import torch
from torch import nn

from ..errors import WeightsError
from ..tensors import MED_CHANNELS, MED_STRIDE, to_unit_range
from .base import MedicalEncoder

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ViTEncoder(MedicalEncoder):
    """Shared implementation; subclasses only pick the default timm model."""

    default_model: str = "vit_base_patch16_224"

    def __init__(self, image_size: int, seed: int = 0, model_name: Optional[str] = None, **_: Any) -> None:
        super().__init__(image_size, seed)
        self.model_name = model_name or self.default_model

    def _build(self, weights: Optional[str]) -> Dict[str, Any]:
        self.backbone = timm.create_model(
            self.model_name,
            pretrained=False,
            num_classes=0,
            img_size=self.image_size,
            dynamic_img_size=True,
        )
        patch = self.backbone.patch_embed.patch_size
        if tuple(patch) != (MED_STRIDE, MED_STRIDE):
            raise WeightsError(f"{self.model_name} uses {tuple(patch)} patches, need stride {MED_STRIDE}")
        self.adapter = nn.Conv2d(self.backbone.embed_dim, MED_CHANNELS, 1)
        adapter_source = f"random:{self.seed}"
        if weights is not None:
            adapter_source = self._load_weights(Path(weights))
        cfg = self.backbone.pretrained_cfg or {}
        mean = torch.tensor(cfg.get("mean", IMAGENET_MEAN), dtype=torch.float32).view(1, 3, 1, 1)
        std = torch.tensor(cfg.get("std", IMAGENET_STD), dtype=torch.float32).view(1, 3, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)
        return {"model_name": self.model_name, "adapter": adapter_source}

    def _load_weights(self, path: Path) -> str:
        """Load ``{"backbone": ..., "adapter": ...}`` saved with torch.save."""
        if not path.exists():
            raise WeightsError(f"ViT weights not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            self.backbone.load_state_dict(state["backbone"])
        except (KeyError, RuntimeError, OSError) as exc:
            raise WeightsError(f"malformed ViT weights at {path}: {exc}") from exc
        if "adapter" not in state:
            return f"random:{self.seed}"
        try:
            self.adapter.load_state_dict(state["adapter"])
        except RuntimeError as exc:
            raise WeightsError(f"adapter in {path} does not fit: {exc}") from exc
        return str(path)

    def _features(self, x: torch.Tensor) -> torch.Tensor:
        normalized = (to_unit_range(x) - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        tokens = self.backbone.forward_features(normalized)[:, self.backbone.num_prefix_tokens:]
        height, width = x.shape[-2] // MED_STRIDE, x.shape[-1] // MED_STRIDE
        grid = tokens.transpose(1, 2).reshape(x.shape[0], -1, height, width)
        return self.adapter(grid)


class SupervisedViTEncoder(ViTEncoder):
    backend_id = "vit-supervised"
    description = "ViT fine-tuned with disease labels"
    default_model = "vit_base_patch16_224"


class MAEViTEncoder(ViTEncoder):
    backend_id = "vit-mae"
    description = "ViT pre-trained as a masked autoencoder"
    default_model = "vit_base_patch16_224.mae"
