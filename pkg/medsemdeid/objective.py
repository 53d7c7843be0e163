"""Learning objective: identity, medical, reconstruction and adversarial terms.

Every term is a pure function of its operands and differentiable with
respect to the image or feature arguments. Identity terms take the
embedder as a callable returning unit-norm embeddings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, LossBoundsError, ShapeMismatchError
from .codec import FeatureExtractor

Embedder = Callable[[torch.Tensor], torch.Tensor]

COSINE_EPS = 1e-8
HINGE_MARGIN = 1.0
_BOUND_TOLERANCE = 1e-4


@dataclass
class LossWeights:
    lambda_med: float = 5.0
    lambda_rev: float = 0.1

    def __post_init__(self) -> None:
        for name in ("lambda_med", "lambda_rev"):
            if getattr(self, name) < 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, name)}", key=f"train.weights.{name}")


@dataclass
class LossBreakdown:
    deid: torch.Tensor
    rev_id: torch.Tensor
    wrong: torch.Tensor
    med: torch.Tensor
    rev: torch.Tensor
    gan_g: torch.Tensor
    gan_d: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    def is_finite(self) -> bool:
        return all(math.isfinite(value) for value in self.as_dict().values())


def identity_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batch-mean cosine between embeddings."""
    return F.cosine_similarity(a, b, dim=-1, eps=COSINE_EPS).mean()


def _check_cosine(value: torch.Tensor, term: str) -> torch.Tensor:
    if abs(float(value)) > 1.0 + _BOUND_TOLERANCE:
        raise LossBoundsError(f"{term} = {float(value)} outside [-1, 1]")
    return value


def _check_nonnegative(value: torch.Tensor, term: str) -> torch.Tensor:
    if float(value) < 0:
        raise LossBoundsError(f"{term} = {float(value)} is negative")
    return value


def loss_deid(x: torch.Tensor, x_enc: torch.Tensor, phi: Embedder) -> torch.Tensor:
    """cos(phi(x), phi(x_enc)); minimized to push the encrypted identity away."""
    return _check_cosine(identity_cosine(phi(x), phi(x_enc)), "deid")


def loss_rev_id(x: torch.Tensor, x_hat: torch.Tensor, phi: Embedder) -> torch.Tensor:
    """-cos(phi(x), phi(x_hat)); minimized to restore identity with the right password."""
    return _check_cosine(-identity_cosine(phi(x), phi(x_hat)), "rev_id")


def loss_wrong(x: torch.Tensor, x_wrong: torch.Tensor, phi: Embedder) -> torch.Tensor:
    return _check_cosine(identity_cosine(phi(x), phi(x_wrong)), "wrong")


def feature_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _check_nonnegative(F.mse_loss(a, b), "med")


def loss_med(f_med: torch.Tensor, x_enc: torch.Tensor, enc_med: FeatureExtractor) -> torch.Tensor:
    """MSE between the original image's medical feature and that of X_enc."""
    return feature_mse(enc_med.extract(x_enc), f_med)


def loss_rev(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel error between the original and the recovered image."""
    if x.shape != x_hat.shape:
        raise ShapeMismatchError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return _check_nonnegative(F.l1_loss(x_hat, x), "rev")


def hinge_d(real_scores: torch.Tensor, fake_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    """max(0, m - D(real)) + mean over fake sets of max(0, m + D(fake))."""
    real = F.relu(HINGE_MARGIN - real_scores).mean()
    fake = torch.stack([F.relu(HINGE_MARGIN + scores).mean() for scores in fake_scores]).mean()
    return real + fake


def hinge_g(fake_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    return -torch.stack([scores.mean() for scores in fake_scores]).mean()


def loss_gan(
    real: torch.Tensor, fakes: Sequence[torch.Tensor], discriminator: Callable[[torch.Tensor], torch.Tensor]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(gan_g, gan_d)`` over every generated image set.

    The discriminator term sees detached fakes so it only trains D.
    """
    gan_g = hinge_g([discriminator(fake) for fake in fakes])
    gan_d = hinge_d(discriminator(real), [discriminator(fake.detach()) for fake in fakes])
    return gan_g, gan_d


def total_loss(
    *,
    deid: torch.Tensor,
    rev_id: torch.Tensor,
    wrong: torch.Tensor,
    med: torch.Tensor,
    rev: torch.Tensor,
    gan_g: torch.Tensor,
    gan_d: torch.Tensor,
    weights: LossWeights | None = None,
) -> LossBreakdown:
    """Assemble the generator objective; gan_d is reported but never summed."""
    weights = weights or LossWeights()
    total = deid + rev_id + wrong + weights.lambda_med * med + weights.lambda_rev * rev + gan_g
    return LossBreakdown(
        deid=deid, rev_id=rev_id, wrong=wrong, med=med, rev=rev, gan_g=gan_g, gan_d=gan_d, total=total
    )
