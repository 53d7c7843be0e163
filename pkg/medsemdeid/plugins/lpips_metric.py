"""Learned perceptual distance through the optional ``lpips`` package."""
from __future__ import annotations

from typing import Any

import torch

from .base import PerceptualPlugin


class LpipsPlugin(PerceptualPlugin):
    name = "lpips"
    description = "Learned perceptual image patch similarity (pip install medsemdeid[perceptual])"

    def __init__(self, net: str = "alex", **_: Any) -> None:
        import lpips

        self.model = lpips.LPIPS(net=net, verbose=False).eval()
        for param in self.model.parameters():
            param.requires_grad_(False)

    @torch.no_grad()
    def distance(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        # lpips expects [-1, 1] inputs, the package's internal range.
        return self.model(x, y).flatten()
