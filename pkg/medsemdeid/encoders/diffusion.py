"""Truncated diffusion-denoiser backend.

The image is encoded to VAE latents, lifted to a small fixed timestep with a
zero noise draw, and passed through the denoiser's input convolution and first
down block. That block's native width is 320 and its downsampler brings the
H/8 latent to H/16, which is exactly the medical feature shape.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, Optional

import torch
from torch import nn
from diffusers import AutoencoderKL, DDPMScheduler, UNet2DConditionModel

from ..errors import WeightsError
from ..tensors import MED_CHANNELS
from .base import MedicalEncoder

logger = logging.getLogger(__name__)

TRUNCATION_DEPTH = 2  # conv_in + down_blocks[0]
DEFAULT_TIMESTEP = 10


def _compact_vae() -> AutoencoderKL:
    return AutoencoderKL(
        in_channels=3,
        out_channels=3,
        down_block_types=("DownEncoderBlock2D",) * 4,
        up_block_types=("UpDecoderBlock2D",) * 4,
        block_out_channels=(32, 64, 64, 64),
        layers_per_block=1,
        latent_channels=4,
        norm_num_groups=32,
        mid_block_add_attention=False,
    )


def _compact_unet(sample_size: int) -> UNet2DConditionModel:
    # only_cross_attention keeps the truncated block spatially local: with an
    # empty context there is no token mixing across the feature grid.
    return UNet2DConditionModel(
        sample_size=sample_size,
        in_channels=4,
        out_channels=4,
        down_block_types=("CrossAttnDownBlock2D", "DownBlock2D"),
        up_block_types=("UpBlock2D", "CrossAttnUpBlock2D"),
        block_out_channels=(MED_CHANNELS, MED_CHANNELS),
        layers_per_block=1,
        cross_attention_dim=64,
        attention_head_dim=8,
        norm_num_groups=32,
        only_cross_attention=True,
    )


class DiffusionTruncatedEncoder(MedicalEncoder):
    backend_id = "diffusion-truncated"
    description = "First denoiser stages of a latent diffusion model at a fixed near-clean timestep"

    def __init__(self, image_size: int, seed: int = 0, timestep: int = DEFAULT_TIMESTEP, **_: Any) -> None:
        super().__init__(image_size, seed)
        self.timestep = timestep

    def _build(self, weights: Optional[str]) -> Dict[str, Any]:
        if weights is None:
            vae = _compact_vae()
            unet = _compact_unet(self.image_size // 8)
            scheduler = DDPMScheduler(num_train_timesteps=1000)
        else:
            source = Path(weights)
            if not source.exists():
                raise WeightsError(f"diffusion weights not found: {source}")
            try:
                vae = AutoencoderKL.from_pretrained(source, subfolder="vae")
                unet = UNet2DConditionModel.from_pretrained(source, subfolder="unet")
                scheduler = DDPMScheduler.from_pretrained(source, subfolder="scheduler")
            except (OSError, ValueError, KeyError) as exc:
                raise WeightsError(f"malformed diffusion weights at {source}: {exc}") from exc
        if unet.config.block_out_channels[0] != MED_CHANNELS:
            raise WeightsError(
                f"first denoiser stage has {unet.config.block_out_channels[0]} channels, need {MED_CHANNELS}"
            )

        self.vae_encoder = vae.encoder
        self.quant_conv = vae.quant_conv if vae.quant_conv is not None else nn.Identity()
        self.scaling_factor = float(vae.config.scaling_factor)
        self.conv_in = unet.conv_in
        self.time_proj = unet.time_proj
        self.time_embedding = unet.time_embedding
        self.first_block = unet.down_blocks[0]
        self.cross_attention_dim = int(unet.config.cross_attention_dim)
        alpha_bar = scheduler.alphas_cumprod[self.timestep]
        self.register_buffer("signal_scale", alpha_bar.sqrt().to(torch.float32).reshape(()))
        logger.debug("diffusion encoder built (timestep=%d)", self.timestep)
        return {
            "truncation_depth": TRUNCATION_DEPTH,
            "timestep": self.timestep,
            "noise": "zero",
        }

    def _features(self, x: torch.Tensor) -> torch.Tensor:
        moments = self.quant_conv(self.vae_encoder(x))
        latent = moments.chunk(2, dim=1)[0] * self.scaling_factor
        # add_noise with a zero draw reduces to scaling by sqrt(alpha_bar_t).
        sample = latent * self.signal_scale
        timesteps = torch.full((x.shape[0],), self.timestep, device=x.device, dtype=torch.long)
        emb = self.time_embedding(self.time_proj(timesteps).to(sample.dtype))
        context = torch.zeros(x.shape[0], 1, self.cross_attention_dim, device=x.device, dtype=sample.dtype)
        hidden = self.conv_in(sample)
        hidden, _ = self.first_block(hidden_states=hidden, temb=emb, encoder_hidden_states=context)
        return hidden
