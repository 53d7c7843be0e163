"""Password vectors: sampling, wrong-password draws, operator entry and digests.

A password is a 512-dim real vector. Sampled passwords are standard normal
draws rescaled to norm sqrt(512). Raw passwords never leave this module as
text; only salted digests are written anywhere.
"""
from __future__ import annotations

import base64
import logging
import math
import os
from pathlib import Path

import click
import numpy as np
import torch
from cryptography.exceptions import InvalidKey
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.pbkdf2 import PBKDF2HMAC

from .errors import ConfigError, InvalidInputError
from .tensors import PASSWORD_DIM, check_password

logger = logging.getLogger(__name__)

WRONG_COSINE_LIMIT = 0.5
MAX_WRONG_TRIES = 100

# Fixed application salt for passphrase expansion, so one passphrase always
# maps to the same vector.
PASSPHRASE_SALT = b"medsemdeid/passphrase/v1"
PASSPHRASE_ITERATIONS = 200_000
DIGEST_ITERATIONS = 100_000
DIGEST_SCHEME = "pbkdf2-sha256"


def _scaled(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v) * math.sqrt(PASSWORD_DIM)


def _as_numpy(p: torch.Tensor | np.ndarray) -> np.ndarray:
    if isinstance(p, torch.Tensor):
        return p.detach().cpu().double().numpy()
    return np.asarray(p, dtype=np.float64)


def sample_password(rng: np.random.Generator) -> torch.Tensor:
    """512 standard-normal entries, L2-normalized and scaled by sqrt(512)."""
    return torch.from_numpy(_scaled(rng.standard_normal(PASSWORD_DIM))).float()


def sample_passwords(rng: np.random.Generator, n: int) -> torch.Tensor:
    return torch.stack([sample_password(rng) for _ in range(n)])


def cosine(a: torch.Tensor | np.ndarray, b: torch.Tensor | np.ndarray) -> float:
    va, vb = _as_numpy(a), _as_numpy(b)
    return float(va @ vb / max(np.linalg.norm(va) * np.linalg.norm(vb), 1e-12))


def draw_wrong_password(
    rng: np.random.Generator, p: torch.Tensor | np.ndarray, max_tries: int = MAX_WRONG_TRIES
) -> tuple[torch.Tensor, int]:
    """Return ``(p_wrong, tries)`` with cos(p, p_wrong) < 0.5.

    After ``max_tries`` rejected draws the last draw is projected onto the
    orthogonal complement of ``p``, which always satisfies the bound.
    """
    ref = _as_numpy(p)
    candidate = rng.standard_normal(PASSWORD_DIM)
    for tries in range(1, max_tries + 1):
        if cosine(ref, candidate) < WRONG_COSINE_LIMIT:
            return torch.from_numpy(_scaled(candidate)).float(), tries
        candidate = rng.standard_normal(PASSWORD_DIM)
    unit = ref / np.linalg.norm(ref)
    orthogonal = candidate - (candidate @ unit) * unit
    if np.linalg.norm(orthogonal) < 1e-12:
        orthogonal = np.roll(unit, 1) - (np.roll(unit, 1) @ unit) * unit
    logger.debug("wrong-password resampling exhausted; orthogonalized")
    return torch.from_numpy(_scaled(orthogonal)).float(), max_tries


def sample_wrong_password(rng: np.random.Generator, p: torch.Tensor | np.ndarray) -> torch.Tensor:
    return draw_wrong_password(rng, p)[0]


def sample_wrong_passwords(rng: np.random.Generator, p: torch.Tensor) -> torch.Tensor:
    return torch.stack([sample_wrong_password(rng, row) for row in p])


def passphrase_to_password(passphrase: str) -> torch.Tensor:
    """Expand a passphrase to a password vector with PBKDF2-HMAC-SHA256.

    The derived bytes are read as uint32 uniforms and mapped through the
    inverse normal CDF before the usual rescaling.
    """
    if not passphrase:
        raise InvalidInputError("empty passphrase")
    kdf = PBKDF2HMAC(
        algorithm=hashes.SHA256(),
        length=4 * PASSWORD_DIM,
        salt=PASSPHRASE_SALT,
        iterations=PASSPHRASE_ITERATIONS,
    )
    words = np.frombuffer(kdf.derive(passphrase.encode("utf-8")), dtype="<u4").astype(np.float64)
    uniform = torch.from_numpy((words + 0.5) / 2.0**32)
    normal = torch.special.ndtri(uniform).numpy()
    return torch.from_numpy(_scaled(normal)).float()


def read_keyfile(path: str | Path) -> torch.Tensor:
    """A keyfile holds 512 floats separated by whitespace or commas."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidInputError(f"cannot read keyfile {path}: {exc}") from exc
    try:
        values = np.array(text.replace(",", " ").split(), dtype=np.float32)
    except ValueError as exc:
        raise InvalidInputError(f"keyfile {path} contains non-numeric entries") from exc
    if values.shape != (PASSWORD_DIM,):
        raise InvalidInputError(f"keyfile {path} holds {values.size} values, need {PASSWORD_DIM}")
    p = torch.from_numpy(values)
    check_password(p)
    return p


def resolve_password(source: str) -> torch.Tensor:
    """Resolve ``env:NAME``, ``keyfile:PATH`` or ``prompt`` to a password vector.

    Environment variables and prompts carry passphrases.
    """
    kind, _, arg = source.partition(":")
    if kind == "env":
        value = os.getenv(arg)
        if not value:
            raise ConfigError(f"environment variable {arg} is not set", key="password")
        return passphrase_to_password(value)
    if kind == "keyfile":
        return read_keyfile(arg)
    if kind == "prompt":
        return passphrase_to_password(click.prompt("Passphrase", hide_input=True))
    raise ConfigError(f"unknown password source '{source}' (use env:NAME, keyfile:PATH or prompt)", key="password")


def _digest_kdf(salt: bytes) -> PBKDF2HMAC:
    return PBKDF2HMAC(algorithm=hashes.SHA256(), length=32, salt=salt, iterations=DIGEST_ITERATIONS)


def _password_bytes(p: torch.Tensor) -> bytes:
    return p.detach().cpu().numpy().astype("<f4").tobytes()


def password_digest(p: torch.Tensor, salt: bytes | None = None) -> str:
    """``scheme$salt$digest`` with base64 fields and a fresh random salt unless one is given."""
    salt = salt if salt is not None else os.urandom(16)
    key = _digest_kdf(salt).derive(_password_bytes(p))
    return "$".join(
        [DIGEST_SCHEME, base64.b64encode(salt).decode("ascii"), base64.b64encode(key).decode("ascii")]
    )


def verify_digest(p: torch.Tensor, digest: str) -> bool:
    try:
        scheme, salt, key = digest.split("$")
    except ValueError:
        return False
    if scheme != DIGEST_SCHEME:
        return False
    try:
        _digest_kdf(base64.b64decode(salt)).verify(_password_bytes(p), base64.b64decode(key))
    except InvalidKey:
        return False
    return True
