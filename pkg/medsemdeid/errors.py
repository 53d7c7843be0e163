"""Exception hierarchy shared by every module.

Each class carries the exit code the CLI maps it to: 2 for configuration and
usage problems, 3 for bad data, 4 for runtime aborts.
"""
from __future__ import annotations


class MedSemError(Exception):
    """Base class for all medsemdeid errors."""

    exit_code: int = 4


class ConfigError(MedSemError):
    """Invalid or incomplete run configuration."""

    exit_code = 2

    def __init__(self, message: str, key: str | None = None) -> None:
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class UnknownBackendError(ConfigError):
    pass


class DataError(MedSemError):
    exit_code = 3


class InvalidInputError(DataError):
    """An input violates a tensor or value invariant."""


class ShapeMismatchError(InvalidInputError):
    pass


class WeightsError(DataError):
    """Backend weights are missing or malformed."""


class CheckpointError(DataError):
    pass


class ManifestError(DataError):
    pass


class EmptyGalleryError(DataError):
    pass


class LossBoundsError(MedSemError):
    """A loss term left its mathematically admissible range."""


class TrainingAbortedError(MedSemError):
    pass


class NonFiniteLossError(TrainingAbortedError):
    def __init__(self, message: str, breakdown: dict[str, float] | None = None) -> None:
        self.breakdown = breakdown or {}
        super().__init__(message)


class UnrecoverableError(MedSemError):
    """Recovery was requested but neither a sidecar nor re-encoding is available."""


class GeneratorError(MedSemError):
    """The external image-generation service failed after all retries."""
