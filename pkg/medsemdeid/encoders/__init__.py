"""Medical semantics encoder backends."""

from .base import BackendRegistry, MedicalEncoder, load_backend, parameter_checksum, registry
from .diffusion import DiffusionTruncatedEncoder
from .vit import MAEViTEncoder, SupervisedViTEncoder

registry.register(DiffusionTruncatedEncoder)
registry.register(SupervisedViTEncoder)
registry.register(MAEViTEncoder)

__all__ = [
    "BackendRegistry",
    "MedicalEncoder",
    "DiffusionTruncatedEncoder",
    "SupervisedViTEncoder",
    "MAEViTEncoder",
    "load_backend",
    "parameter_checksum",
    "registry",
]
