"""Reversible face de-identification that keeps medical semantics."""

from .codec import CodecConfig, MedSemCodec, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, MedSemError
from .tensors import EncryptedFeature, read_sidecar, write_sidecar

__all__ = [
    "CodecConfig",
    "ConfigError",
    "DataError",
    "EncryptedFeature",
    "MedSemCodec",
    "MedSemError",
    "load_checkpoint",
    "read_sidecar",
    "save_checkpoint",
    "write_sidecar",
]

__version__ = "0.1.0"
