"""Tensor contracts, image file I/O and the encrypted-feature sidecar format.

Images live in [-1, 1] inside the package and in [0, 1] at file boundaries;
on disk they are 8-bit PNG. PSNR is always computed on the [0, 1] scale.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InvalidInputError, ShapeMismatchError

logger = logging.getLogger(__name__)

SPATIAL_MULTIPLE = 32
PASSWORD_DIM = 512
FACE_CHANNELS = 512
MED_CHANNELS = 320
MED_STRIDE = 16

SIDECAR_MAGIC = b"MSDE"
SIDECAR_VERSION = 1
_SIDECAR_HEADER = struct.Struct("<4sIII")

LOSSLESS_SUFFIXES = {".png", ".bmp", ".tif", ".tiff"}
_RANGE_TOLERANCE = 1e-4


def as_batch(x: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    """Add a leading batch axis when ``x`` has ``ndim - 1`` dims.

    Returns the batched tensor and whether the axis was added, so callers can
    squeeze their outputs back.
    """
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    if x.dim() != ndim:
        raise ShapeMismatchError(f"expected {ndim - 1} or {ndim} dims, got shape {tuple(x.shape)}")
    return x, False


def check_image(x: torch.Tensor, *, check_range: bool = True) -> None:
    """Validate a [3, H, W] or [B, 3, H, W] image in the internal [-1, 1] range."""
    if x.dim() not in (3, 4) or x.shape[-3] != 3:
        raise InvalidInputError(f"image must be [3, H, W] or [B, 3, H, W], got {tuple(x.shape)}")
    height, width = x.shape[-2:]
    if height <= 0 or width <= 0 or height % SPATIAL_MULTIPLE or width % SPATIAL_MULTIPLE:
        raise InvalidInputError(
            f"image dims {height}x{width} are not positive multiples of {SPATIAL_MULTIPLE}"
        )
    if check_range:
        if not torch.isfinite(x).all():
            raise InvalidInputError("image contains non-finite values")
        if x.min() < -1 - _RANGE_TOLERANCE or x.max() > 1 + _RANGE_TOLERANCE:
            raise InvalidInputError("image values outside [-1, 1]")


def check_password(p: torch.Tensor) -> None:
    if p.shape[-1] != PASSWORD_DIM or p.dim() not in (1, 2):
        raise InvalidInputError(f"password must be [{PASSWORD_DIM}] or [B, {PASSWORD_DIM}], got {tuple(p.shape)}")
    if not torch.isfinite(p).all():
        raise InvalidInputError("password contains non-finite values")


def to_unit_range(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def to_model_range(x: torch.Tensor) -> torch.Tensor:
    return x * 2.0 - 1.0


@dataclass
class EncryptedFeature:
    """Password-encrypted tokens plus the grid they unflatten to.

    ``tokens`` is [T, 512] or [B, T, 512] with T = height * width, where
    height and width are the feature-grid dims (image dims / 32).
    """

    tokens: torch.Tensor
    height: int
    width: int

    def __post_init__(self) -> None:
        if self.tokens.shape[-1] != FACE_CHANNELS:
            raise InvalidInputError(f"token width must be {FACE_CHANNELS}, got {self.tokens.shape[-1]}")
        if self.tokens.shape[-2] != self.height * self.width:
            raise ShapeMismatchError(
                f"{self.tokens.shape[-2]} tokens do not match a {self.height}x{self.width} grid"
            )

    @property
    def token_count(self) -> int:
        return self.height * self.width

    @classmethod
    def from_map(cls, feature: torch.Tensor) -> "EncryptedFeature":
        """[B, C, h, w] (or [C, h, w]) -> tokens [B, h*w, C]."""
        batched, added = as_batch(feature, 4)
        _, _, height, width = batched.shape
        tokens = batched.flatten(2).transpose(1, 2)
        return cls(tokens[0] if added else tokens, height, width)

    def to_map(self) -> torch.Tensor:
        tokens, added = as_batch(self.tokens, 3)
        feature = tokens.transpose(1, 2).reshape(tokens.shape[0], FACE_CHANNELS, self.height, self.width)
        return feature[0] if added else feature

    def detach(self) -> "EncryptedFeature":
        return EncryptedFeature(self.tokens.detach(), self.height, self.width)


def write_sidecar(feature: EncryptedFeature, path: str | Path) -> None:
    """Write a single (unbatched) encrypted feature as header + little-endian float32."""
    tokens = feature.tokens
    if tokens.dim() == 3:
        if tokens.shape[0] != 1:
            raise InvalidInputError("sidecar files hold exactly one feature")
        tokens = tokens[0]
    header = _SIDECAR_HEADER.pack(SIDECAR_MAGIC, SIDECAR_VERSION, feature.height, feature.width)
    payload = tokens.detach().cpu().numpy().astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_sidecar(path: str | Path) -> EncryptedFeature:
    data = Path(path).read_bytes()
    if len(data) < _SIDECAR_HEADER.size:
        raise InvalidInputError(f"{path}: truncated sidecar header")
    magic, version, height, width = _SIDECAR_HEADER.unpack_from(data)
    if magic != SIDECAR_MAGIC:
        raise InvalidInputError(f"{path}: bad sidecar magic {magic!r}")
    if version != SIDECAR_VERSION:
        raise InvalidInputError(f"{path}: unsupported sidecar version {version}")
    expected = height * width * FACE_CHANNELS * 4
    body = data[_SIDECAR_HEADER.size:]
    if len(body) != expected:
        raise InvalidInputError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    tokens = np.frombuffer(body, dtype="<f4").reshape(height * width, FACE_CHANNELS)
    return EncryptedFeature(torch.from_numpy(tokens.astype(np.float32)), height, width)


def load_image(path: str | Path, size: int | None = None) -> torch.Tensor:
    """Read an image file as a [3, H, W] tensor in [-1, 1]."""
    path = Path(path)
    if path.suffix.lower() not in LOSSLESS_SUFFIXES:
        logger.warning("%s: lossy input format; compression perturbs identity embeddings", path.name)
    with Image.open(path) as img:
        return pil_to_tensor(img, size)


def pil_to_tensor(img: Image.Image, size: int | None = None) -> torch.Tensor:
    img = img.convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BICUBIC)
    array = np.asarray(img, dtype=np.float32) / 255.0
    x = torch.from_numpy(array).permute(2, 0, 1).contiguous()
    return to_model_range(x)


def image_to_pil(x: torch.Tensor) -> Image.Image:
    if x.dim() == 4:
        x = x[0]
    array = (to_unit_range(x.detach().cpu()).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    return Image.fromarray(array)


def save_image(x: torch.Tensor, path: str | Path) -> None:
    """Write a [3, H, W] tensor in [-1, 1] as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image_to_pil(x).save(path, format="PNG")
