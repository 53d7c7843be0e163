"""The de-identification codec: face encoder, medical fusion, ID-Encryptor,
ID-Decryptor, image decoder and the patch discriminator."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from itertools import chain
from pathlib import Path
from typing import Any, Iterator, Protocol

import torch
from torch import nn

from .errors import CheckpointError, InvalidInputError, ShapeMismatchError, UnrecoverableError
from .tensors import (
    FACE_CHANNELS,
    MED_CHANNELS,
    PASSWORD_DIM,
    EncryptedFeature,
    as_batch,
    check_image,
    check_password,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
DECODER_ARCH_ID = "nearest-res-v1"
PARAMETER_GROUPS = ("face_encoder", "fusion", "encryptor", "decryptor", "decoder", "discriminator")


class FeatureExtractor(Protocol):
    def extract(self, x: torch.Tensor) -> torch.Tensor: ...


@dataclass
class CodecConfig:
    image_size: int = 128
    base_channels: int = 64
    encryptor_depth: int = 4
    decryptor_depth: int = 4
    num_heads: int = 8
    max_grid: int = 16
    use_med_feature: bool = True
    disc_channels: int = 64
    disc_layers: int = 3
    decoder_arch_id: str = DECODER_ARCH_ID


def _groups(channels: int) -> int:
    return math.gcd(32, channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.body = nn.Sequential(
            nn.GroupNorm(_groups(in_channels), in_channels),
            nn.SiLU(),
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.GroupNorm(_groups(out_channels), out_channels),
            nn.SiLU(),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
        )
        self.skip = nn.Identity() if in_channels == out_channels else nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.skip(x) + self.body(x)


def _stage_channels(base: int) -> list[int]:
    # Five stride-2 stages; the last always lands on the 512-channel face feature.
    channels = [min(base * 2 ** i, FACE_CHANNELS) for i in range(1, 5)]
    return channels + [FACE_CHANNELS]


class FaceEncoder(nn.Module):
    """Strided residual encoder, [B, 3, H, W] -> [B, 512, H/32, W/32]."""

    def __init__(self, base_channels: int) -> None:
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(3, base_channels, 3, padding=1)]
        channels = base_channels
        for out in _stage_channels(base_channels):
            layers += [nn.Conv2d(channels, out, 4, stride=2, padding=1), ResidualBlock(out, out)]
            channels = out
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class MedicalFusion(nn.Module):
    """Learned 2x downscale of f_med, channel concat, three residual blocks."""

    def __init__(self) -> None:
        super().__init__()
        self.downscale = nn.Conv2d(MED_CHANNELS, MED_CHANNELS, 4, stride=2, padding=1)
        self.blocks = nn.Sequential(
            ResidualBlock(FACE_CHANNELS + MED_CHANNELS, FACE_CHANNELS),
            ResidualBlock(FACE_CHANNELS, FACE_CHANNELS),
            ResidualBlock(FACE_CHANNELS, FACE_CHANNELS),
        )

    def forward(self, f_face: torch.Tensor, f_med: torch.Tensor) -> torch.Tensor:
        return self.blocks(torch.cat([f_face, self.downscale(f_med)], dim=1))


class IDTransformer(nn.Module):
    """Pre-norm transformer over spatial tokens plus one trailing password token.

    Shared by the ID-Encryptor and the ID-Decryptor; the password token is
    stripped from the output.
    """

    def __init__(self, depth: int, num_heads: int, max_grid: int, width: int = FACE_CHANNELS) -> None:
        super().__init__()
        self.max_grid = max_grid
        self.row_embed = nn.Parameter(torch.randn(max_grid, width) * 0.02)
        self.col_embed = nn.Parameter(torch.randn(max_grid, width) * 0.02)
        self.password_proj = nn.Linear(PASSWORD_DIM, width)
        self.password_pos = nn.Parameter(torch.randn(1, 1, width) * 0.02)
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                width,
                num_heads,
                dim_feedforward=4 * width,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            for _ in range(depth)
        )
        self.norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, width)

    def forward(self, tokens: torch.Tensor, height: int, width: int, password: torch.Tensor) -> torch.Tensor:
        if height > self.max_grid or width > self.max_grid:
            raise InvalidInputError(f"feature grid {height}x{width} exceeds max_grid={self.max_grid}")
        count = height * width
        pos = (self.row_embed[:height, None, :] + self.col_embed[None, :width, :]).reshape(count, -1)
        key = self.password_proj(password).unsqueeze(1) + self.password_pos
        x = torch.cat([tokens + pos, key], dim=1)
        for block in self.blocks:
            x = block(x)
        return self.out(self.norm(x))[:, :count]


class ImageDecoder(nn.Module):
    """Nearest-upsample residual decoder mirroring FaceEncoder, tanh output."""

    def __init__(self, base_channels: int) -> None:
        super().__init__()
        outs = list(reversed(_stage_channels(base_channels)[:-1])) + [base_channels]
        layers: list[nn.Module] = [ResidualBlock(FACE_CHANNELS, FACE_CHANNELS)]
        channels = FACE_CHANNELS
        for out in outs:
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(channels, out, 3, padding=1),
                ResidualBlock(out, out),
            ]
            channels = out
        layers += [
            nn.GroupNorm(_groups(channels), channels),
            nn.SiLU(),
            nn.Conv2d(channels, 3, 3, padding=1),
            nn.Tanh(),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.net(f)


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN; instance norm keeps scores per-sample."""

    def __init__(self, channels: int = 64, n_layers: int = 3) -> None:
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(3, channels, 4, 2, 1), nn.LeakyReLU(0.2)]
        mult = 1
        for i in range(1, n_layers + 1):
            prev, mult = mult, min(2 ** i, 8)
            layers += [
                nn.Conv2d(channels * prev, channels * mult, 4, 2 if i < n_layers else 1, 1, bias=False),
                nn.InstanceNorm2d(channels * mult, affine=True),
                nn.LeakyReLU(0.2),
            ]
        layers.append(nn.Conv2d(channels * mult, 1, 4, 1, 1))
        self.model = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


@dataclass
class TrainOutputs:
    f: torch.Tensor
    f_enc: EncryptedFeature
    x_enc: torch.Tensor
    x_hat: torch.Tensor
    x_wrong: torch.Tensor


@dataclass
class Recovery:
    image: torch.Tensor
    path: str  # "sidecar" or "re-encode"

    @property
    def exact(self) -> bool:
        return self.path == "sidecar"


class MedSemCodec(nn.Module):
    """Password-conditioned reversible de-identification network."""

    def __init__(self, config: CodecConfig | None = None) -> None:
        super().__init__()
        self.config = config or CodecConfig()
        cfg = self.config
        self.face_encoder = FaceEncoder(cfg.base_channels)
        self.fusion = MedicalFusion()
        self.encryptor = IDTransformer(cfg.encryptor_depth, cfg.num_heads, cfg.max_grid)
        self.decryptor = IDTransformer(cfg.decryptor_depth, cfg.num_heads, cfg.max_grid)
        self.decoder = ImageDecoder(cfg.base_channels)
        self.discriminator = PatchDiscriminator(cfg.disc_channels, cfg.disc_layers)

    def generator_parameters(self) -> Iterator[nn.Parameter]:
        return chain.from_iterable(
            getattr(self, name).parameters() for name in PARAMETER_GROUPS if name != "discriminator"
        )

    def _password_batch(self, p: torch.Tensor, batch: int) -> torch.Tensor:
        check_password(p)
        pb = p.unsqueeze(0) if p.dim() == 1 else p
        if pb.shape[0] == 1 and batch > 1:
            pb = pb.expand(batch, -1)
        if pb.shape[0] != batch:
            raise ShapeMismatchError(f"{pb.shape[0]} passwords for a batch of {batch}")
        return pb

    def encode_face(self, x: torch.Tensor) -> torch.Tensor:
        check_image(x)
        xb, added = as_batch(x, 4)
        out = self.face_encoder(xb)
        return out[0] if added else out

    def fuse_medical(self, f_face: torch.Tensor, f_med: torch.Tensor) -> torch.Tensor:
        face, added = as_batch(f_face, 4)
        med, _ = as_batch(f_med, 4)
        if face.shape[1] != FACE_CHANNELS or med.shape[1] != MED_CHANNELS:
            raise ShapeMismatchError(
                f"expected {FACE_CHANNELS}/{MED_CHANNELS} channels, got {face.shape[1]}/{med.shape[1]}"
            )
        height, width = face.shape[-2:]
        if tuple(med.shape[-2:]) != (2 * height, 2 * width) or med.shape[0] != face.shape[0]:
            raise ShapeMismatchError(
                f"medical feature {tuple(med.shape)} does not pair with face feature {tuple(face.shape)}"
            )
        if not self.config.use_med_feature:
            med = torch.zeros_like(med)
        out = self.fusion(face, med)
        return out[0] if added else out

    def encrypt(self, f: torch.Tensor, p: torch.Tensor) -> EncryptedFeature:
        fb, added = as_batch(f, 4)
        if fb.shape[1] != FACE_CHANNELS:
            raise ShapeMismatchError(f"fused feature must have {FACE_CHANNELS} channels")
        plain = EncryptedFeature.from_map(fb)
        tokens = self.encryptor(plain.tokens, plain.height, plain.width, self._password_batch(p, fb.shape[0]))
        return EncryptedFeature(tokens[0] if added else tokens, plain.height, plain.width)

    def decrypt(self, f_enc: EncryptedFeature, p: torch.Tensor) -> torch.Tensor:
        tokens, added = as_batch(f_enc.tokens, 3)
        if tokens.shape[1] != f_enc.token_count:
            raise ShapeMismatchError(f"{tokens.shape[1]} tokens for a {f_enc.height}x{f_enc.width} grid")
        out = self.decryptor(tokens, f_enc.height, f_enc.width, self._password_batch(p, tokens.shape[0]))
        feature = EncryptedFeature(out, f_enc.height, f_enc.width).to_map()
        return feature[0] if added else feature

    def decode_image(self, f: torch.Tensor | EncryptedFeature) -> torch.Tensor:
        if isinstance(f, EncryptedFeature):
            f = f.to_map()
        fb, added = as_batch(f, 4)
        if fb.shape[1] != FACE_CHANNELS:
            raise ShapeMismatchError(f"decoder input must have {FACE_CHANNELS} channels")
        out = self.decoder(fb)
        return out[0] if added else out

    def deidentify(
        self, x: torch.Tensor, p: torch.Tensor, med: FeatureExtractor, *, return_feature: bool = False
    ) -> torch.Tensor | tuple[torch.Tensor, EncryptedFeature]:
        f = self.fuse_medical(self.encode_face(x), med.extract(x))
        f_enc = self.encrypt(f, p)
        x_enc = self.decode_image(f_enc.to_map())
        return (x_enc, f_enc) if return_feature else x_enc

    def recover(
        self,
        source: EncryptedFeature | torch.Tensor | None,
        p: torch.Tensor,
        med: FeatureExtractor | None = None,
        *,
        allow_reencode: bool = True,
    ) -> Recovery:
        """Decrypt a stored feature exactly, or approximate it from an encrypted image."""
        if isinstance(source, EncryptedFeature):
            f_enc, path = source, "sidecar"
        elif source is not None and allow_reencode and med is not None:
            f = self.fuse_medical(self.encode_face(source), med.extract(source))
            f_enc, path = EncryptedFeature.from_map(f), "re-encode"
        else:
            raise UnrecoverableError("no encrypted-feature sidecar and re-encoding is disabled")
        return Recovery(self.decode_image(self.decrypt(f_enc, p)), path)

    def discriminate(self, x: torch.Tensor) -> torch.Tensor:
        check_image(x, check_range=False)
        xb, added = as_batch(x, 4)
        out = self.discriminator(xb)
        return out[0] if added else out

    def forward_train(
        self, x: torch.Tensor, p: torch.Tensor, p_wrong: torch.Tensor, f_med: torch.Tensor
    ) -> TrainOutputs:
        f = self.fuse_medical(self.encode_face(x), f_med)
        f_enc = self.encrypt(f, p)
        return TrainOutputs(
            f=f,
            f_enc=f_enc,
            x_enc=self.decode_image(f_enc.to_map()),
            x_hat=self.decode_image(self.decrypt(f_enc, p)),
            x_wrong=self.decode_image(self.decrypt(f_enc, p_wrong)),
        )


@dataclass
class LoadedCheckpoint:
    codec: MedSemCodec
    header: dict[str, Any]
    trainer_state: dict[str, Any] | None = None


def checkpoint_header(
    codec: MedSemCodec, training_step: int, encoder_metadata: dict[str, Any] | None = None
) -> dict[str, Any]:
    cfg = codec.config
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "image_size": cfg.image_size,
        "password_dim": PASSWORD_DIM,
        "encryptor_depth": cfg.encryptor_depth,
        "decoder_arch_id": cfg.decoder_arch_id,
        "training_step": training_step,
        "codec_config": asdict(cfg),
        "encoder_metadata": encoder_metadata or {},
    }


def save_checkpoint(
    path: str | Path,
    codec: MedSemCodec,
    *,
    training_step: int = 0,
    encoder_metadata: dict[str, Any] | None = None,
    trainer_state: dict[str, Any] | None = None,
) -> None:
    """Write every parameter group and a JSON header into one archive."""
    path = Path(path)
    archive = {
        "header": json.dumps(checkpoint_header(codec, training_step, encoder_metadata), sort_keys=True),
        "parameters": {name: getattr(codec, name).state_dict() for name in PARAMETER_GROUPS},
        "trainer_state": trainer_state,
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(archive, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info("checkpoint written: %s (step %d)", path, training_step)


def load_checkpoint(path: str | Path, map_location: str | torch.device = "cpu") -> LoadedCheckpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = torch.load(path, map_location=map_location, weights_only=True)
        header = json.loads(archive["header"])
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    if header.get("password_dim") != PASSWORD_DIM:
        raise CheckpointError(f"{path}: password_dim {header.get('password_dim')} != {PASSWORD_DIM}")
    codec = MedSemCodec(CodecConfig(**header["codec_config"]))
    parameters = archive.get("parameters", {})
    for name in PARAMETER_GROUPS:
        if name not in parameters:
            raise CheckpointError(f"{path}: missing parameter group '{name}'")
        try:
            getattr(codec, name).load_state_dict(parameters[name])
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: parameter group '{name}' does not fit: {exc}") from exc
    return LoadedCheckpoint(codec=codec, header=header, trainer_state=archive.get("trainer_state"))
