"""Adversarial training loop for the de-identification codec.

One discriminator update is followed by one codec update per step. All
randomness inside a step (batch order, passwords) derives from
``(seed, step)``, so a resumed run replays the uninterrupted loss stream.
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .codec import CodecConfig, MedSemCodec, load_checkpoint, save_checkpoint
from .data import FaceBatch, collate
from .encoders.base import MedicalEncoder
from .errors import ConfigError, DataError, NonFiniteLossError
from .evaluation import CodecProbe, probe_codec
from .identity import IdentityEmbedder
from .objective import (
    LossBreakdown,
    LossWeights,
    hinge_d,
    hinge_g,
    loss_deid,
    loss_med,
    loss_rev,
    loss_rev_id,
    loss_wrong,
    total_loss,
)
from .passwords import sample_passwords, sample_wrong_passwords

logger = logging.getLogger(__name__)

TRAIN_LOG = "train_log.jsonl"
# Keys a gate may constrain; "min_" means the probe value must be >= the threshold.
GATE_KEYS = {
    "min_psnr_right": ("psnr_right", 1),
    "max_psnr_wrong": ("psnr_wrong", -1),
    "min_id_dis_enc": ("id_dis_enc", 1),
    "max_id_dis_hat": ("id_dis_hat", -1),
    "max_med_distance": ("med_distance", -1),
}

# Independent streams derived from the run seed.
_ORDER_STREAM = 0
_PASSWORD_STREAM = 1
PROBE_STREAM = 2


@dataclass
class TrainConfig:
    beta1: float = 0.5
    beta2: float = 0.99
    lr_init: float = 2e-4
    lr_halve_step: int = 150_000
    total_steps: int = 300_000
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 10.0
    use_med_loss: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 5_000
    checkpoint_every: int = 10_000
    log_every: int = 1
    gate: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr_halve_step < 1:
            raise ConfigError("must be >= 1", key="train.lr_halve_step")
        if self.lr_halve_step >= self.total_steps:
            raise ConfigError(
                f"must be below total_steps ({self.total_steps}), got {self.lr_halve_step}", key="train.lr_halve_step"
            )
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", key="train.batch_size")
        for name in ("lr_init", "beta1", "beta2", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ConfigError("must be > 0", key=f"train.{name}")
        for name in ("eval_every", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", key=f"train.{name}")
        unknown = sorted(set(self.gate) - set(GATE_KEYS))
        if unknown:
            raise ConfigError(f"unknown gate keys {unknown} (known: {sorted(GATE_KEYS)})", key="train.gate")

    def effective_weights(self) -> LossWeights:
        if self.use_med_loss:
            return self.weights
        return LossWeights(lambda_med=0.0, lambda_rev=self.weights.lambda_rev)


def learning_rate(step: int, config: TrainConfig) -> float:
    """lr_init before ``lr_halve_step``, half of it afterwards (one halving)."""
    return config.lr_init * 0.5 ** min(step // config.lr_halve_step, 1)


def init_codec(config: CodecConfig, seed: int) -> MedSemCodec:
    """Build a codec whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MedSemCodec(config)


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> List[int]:
    """Indices for ``step``: consecutive slices of per-epoch permutations."""
    indices = []
    for position in range(step * batch_size, (step + 1) * batch_size):
        epoch, offset = divmod(position, n)
        order = np.random.default_rng([seed, _ORDER_STREAM, epoch]).permutation(n)
        indices.append(int(order[offset]))
    return indices


def step_passwords(
    seed: int, step: int, batch: int, stream: int = _PASSWORD_STREAM
) -> tuple[torch.Tensor, torch.Tensor]:
    rng = np.random.default_rng([seed, stream, step])
    p = sample_passwords(rng, batch)
    return p, sample_wrong_passwords(rng, p)


@dataclass
class GateResult:
    passed: bool
    metrics: Dict[str, float]
    failures: List[str] = field(default_factory=list)


def check_gate(probe: CodecProbe, gate: Dict[str, float]) -> GateResult:
    metrics = probe.as_dict()
    failures = []
    for key, threshold in gate.items():
        name, sign = GATE_KEYS[key]
        if sign * (metrics[name] - threshold) < 0:
            failures.append(f"{name}={metrics[name]:.4f} violates {key}={threshold}")
    return GateResult(passed=not failures, metrics=metrics, failures=failures)


@dataclass
class TrainResult:
    codec: MedSemCodec
    step: int
    log_path: Optional[Path]
    checkpoints: List[Path]
    gate: GateResult


def _set_requires_grad(module: nn.Module, flag: bool) -> None:
    for param in module.parameters():
        param.requires_grad_(flag)


class Trainer:
    """Single-writer optimizer loop; evaluation always runs on a snapshot."""

    def __init__(
        self,
        config: TrainConfig,
        codec: MedSemCodec,
        enc_med: MedicalEncoder,
        embedder: IdentityEmbedder,
        *,
        device: str | torch.device = "cpu",
    ) -> None:
        self.config = config
        self.device = torch.device(device)
        self.codec = codec.to(self.device)
        self.enc_med = enc_med.to(self.device)
        self.embedder = embedder.to(self.device)
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(list(codec.generator_parameters()), lr=config.lr_init, betas=betas)
        self.opt_d = torch.optim.Adam(codec.discriminator.parameters(), lr=config.lr_init, betas=betas)
        self.weights = config.effective_weights()
        self.step = 0

    def _set_lr(self) -> float:
        lr = learning_rate(self.step, self.config)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def train_step(self, batch: FaceBatch) -> LossBreakdown:
        cfg = self.config
        self._set_lr()
        x = batch.images.to(self.device)
        p, p_wrong = (t.to(self.device) for t in step_passwords(cfg.seed, self.step, len(batch)))
        with torch.no_grad():
            f_med = self.enc_med.extract(x)
        out = self.codec.forward_train(x, p, p_wrong, f_med)
        fakes = [out.x_enc, out.x_hat, out.x_wrong]

        # Discriminator update on detached fakes.
        gan_d = hinge_d(self.codec.discriminate(x), [self.codec.discriminate(f.detach()) for f in fakes])
        if not torch.isfinite(gan_d):
            raise NonFiniteLossError(f"non-finite discriminator loss at step {self.step}", {"gan_d": float(gan_d)})
        self.opt_d.zero_grad(set_to_none=True)
        gan_d.backward()
        torch.nn.utils.clip_grad_norm_(self.codec.discriminator.parameters(), cfg.grad_clip)
        self.opt_d.step()

        # Codec update against the refreshed discriminator.
        _set_requires_grad(self.codec.discriminator, False)
        try:
            if self.weights.lambda_med > 0:
                med = loss_med(f_med, out.x_enc, self.enc_med)
            else:
                with torch.no_grad():
                    med = loss_med(f_med, out.x_enc, self.enc_med)
            breakdown = total_loss(
                deid=loss_deid(x, out.x_enc, self.embedder),
                rev_id=loss_rev_id(x, out.x_hat, self.embedder),
                wrong=loss_wrong(x, out.x_wrong, self.embedder),
                med=med,
                rev=loss_rev(x, out.x_hat),
                gan_g=hinge_g([self.codec.discriminate(f) for f in fakes]),
                gan_d=gan_d.detach(),
                weights=self.weights,
            )
            if not breakdown.is_finite():
                raise NonFiniteLossError(f"non-finite loss at step {self.step}", breakdown.as_dict())
            self.opt_g.zero_grad(set_to_none=True)
            breakdown.total.backward()
            torch.nn.utils.clip_grad_norm_(list(self.codec.generator_parameters()), cfg.grad_clip)
            self.opt_g.step()
        finally:
            _set_requires_grad(self.codec.discriminator, True)
        self.step += 1
        return breakdown

    def state_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.step = int(state["step"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        torch.set_rng_state(state["torch_rng"])

    def resume(self, path: str | Path) -> None:
        """Restore codec weights and trainer state from a checkpoint."""
        loaded = load_checkpoint(path, map_location=self.device)
        if loaded.trainer_state is None:
            raise DataError(f"{path} holds no trainer state and cannot be resumed")
        self.codec.load_state_dict(loaded.codec.state_dict())
        self.load_state_dict(loaded.trainer_state)
        logger.info("resumed from %s at step %d", path, self.step)

    def save(self, path: Path) -> Path:
        save_checkpoint(
            path,
            self.codec,
            training_step=self.step,
            encoder_metadata=self.enc_med.metadata,
            trainer_state=self.state_dict(),
        )
        return path

    def snapshot(self) -> MedSemCodec:
        return copy.deepcopy(self.codec).eval()

    def probe(self, holdout: FaceBatch) -> CodecProbe:
        x = holdout.images.to(self.device)
        p, p_wrong = (t.to(self.device) for t in step_passwords(self.config.seed, 0, len(holdout), PROBE_STREAM))
        return probe_codec(self.snapshot(), self.enc_med, self.embedder, x, p, p_wrong)


def train(
    config: TrainConfig,
    corpus: Sequence,
    codec: MedSemCodec,
    enc_med: MedicalEncoder,
    embedder: IdentityEmbedder,
    *,
    output_dir: Optional[str | Path] = None,
    holdout: Optional[Sequence] = None,
    resume: Optional[str | Path] = None,
    device: str | torch.device = "cpu",
) -> TrainResult:
    """Run the loop to ``config.total_steps``, logging and checkpointing on schedule.

    Without ``output_dir`` nothing is written to disk.
    """
    if len(corpus) == 0:
        raise DataError("training corpus is empty")
    trainer = Trainer(config, codec, enc_med, embedder, device=device)
    if resume is not None:
        trainer.resume(resume)

    out = Path(output_dir) if output_dir is not None else None
    log_path = None
    checkpoints: List[Path] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / TRAIN_LOG
        if resume is not None:
            _truncate_log(log_path, trainer.step)
    source = holdout if holdout is not None and len(holdout) > 0 else corpus
    probe_batch = collate([source[i] for i in range(min(config.batch_size, len(source)))])
    logger.info("training %d -> %d steps on %d samples", trainer.step, config.total_steps, len(corpus))
    started = time.perf_counter()

    while trainer.step < config.total_steps:
        step = trainer.step
        batch = collate([corpus[i] for i in batch_indices(step, len(corpus), config.batch_size, config.seed)])
        lr = learning_rate(step, config)
        breakdown = trainer.train_step(batch)
        if log_path is not None and step % config.log_every == 0:
            record = {"kind": "step", "step": step, "lr": lr, **breakdown.as_dict()}
            record["wall_time"] = round(time.perf_counter() - started, 3)
            _append_jsonl(log_path, record)
        if trainer.step % config.eval_every == 0 and trainer.step < config.total_steps:
            probe = trainer.probe(probe_batch)
            logger.info("step %d: %s", trainer.step, json.dumps(probe.as_dict()))
            if log_path is not None:
                _append_jsonl(log_path, {"kind": "eval", "step": trainer.step, **probe.as_dict()})
        if out is not None and trainer.step % config.checkpoint_every == 0:
            checkpoints.append(trainer.save(out / f"step_{trainer.step:07d}.pt"))
            trainer.save(out / "latest.pt")

    if out is not None:
        checkpoints.append(trainer.save(out / "final.pt"))
    gate = check_gate(trainer.probe(probe_batch), config.gate)
    if log_path is not None:
        _append_jsonl(log_path, {"kind": "gate", "step": trainer.step, "passed": gate.passed, **gate.metrics})
    if gate.passed:
        logger.info("evaluation gate passed at step %d", trainer.step)
    else:
        logger.warning("evaluation gate failed: %s", "; ".join(gate.failures))
    return TrainResult(codec=trainer.codec, step=trainer.step, log_path=log_path, checkpoints=checkpoints, gate=gate)


def _append_jsonl(path: Path, record: Dict[str, Any]) -> None:
    with path.open("a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def _truncate_log(path: Path, step: int) -> None:
    """Drop records written after the checkpoint at ``step`` so a resumed run does not repeat them."""
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines()
    kept = []
    for line in lines:
        record = json.loads(line)
        kind = record.get("kind")
        # step records carry the index they ran at; eval records the step reached
        if (kind == "step" and record["step"] < step) or (kind == "eval" and record["step"] <= step):
            kept.append(line)
    dropped = len(lines) - len(kept)
    if dropped:
        logger.info("dropped %d log records past step %d from %s", dropped, step, path)
    path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")


def read_train_log(path: str | Path, kind: str = "step") -> List[Dict[str, Any]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [record for record in map(json.loads, lines) if record.get("kind") == kind]
