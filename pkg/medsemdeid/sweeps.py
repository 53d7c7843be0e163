"""Loss-weight sweeps and the medical-feature ablation grid.

Each setting trains a fresh codec from the same seed on the same corpus and
is probed on the same held-out batch, so rows differ only in the setting.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

from .codec import CodecConfig
from .data import collate
from .encoders.base import MedicalEncoder
from .errors import ConfigError
from .evaluation import CodecProbe, format_table, probe_codec
from .identity import IdentityEmbedder
from .trainer import PROBE_STREAM, TrainConfig, init_codec, step_passwords, train

logger = logging.getLogger(__name__)

SWEEP_PARAMS = ("lambda_med", "lambda_rev")
ABLATION_GRID = ((False, False), (True, False), (False, True), (True, True))
RESULTS_NAME = "results.jsonl"


@dataclass
class SweepRow:
    label: str
    settings: Dict[str, Any]
    probe: CodecProbe

    def to_dict(self) -> Dict[str, Any]:
        return {"label": self.label, "settings": self.settings, **self.probe.as_dict()}


@dataclass
class _Setup:
    codec_config: CodecConfig
    corpus: Sequence
    holdout: Sequence
    enc_med: MedicalEncoder
    embedder: IdentityEmbedder
    device: str
    output_dir: Optional[Path]


def _run_one(setup: _Setup, label: str, settings: Dict[str, Any], codec_config: CodecConfig, config: TrainConfig) -> SweepRow:
    logger.info("run %s", label)
    out = setup.output_dir / label if setup.output_dir is not None else None
    result = train(
        config,
        setup.corpus,
        init_codec(codec_config, config.seed),
        setup.enc_med,
        setup.embedder,
        output_dir=out,
        holdout=setup.holdout,
        device=setup.device,
    )
    batch = collate([setup.holdout[i] for i in range(len(setup.holdout))])
    x = batch.images.to(setup.device)
    p, p_wrong = (t.to(setup.device) for t in step_passwords(config.seed, 0, len(batch), stream=PROBE_STREAM))
    probe = probe_codec(result.codec.eval(), setup.enc_med, setup.embedder, x, p, p_wrong)
    row = SweepRow(label, settings, probe)
    if setup.output_dir is not None:
        with (setup.output_dir / RESULTS_NAME).open("a", encoding="utf-8") as f:
            f.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")
    return row


def _setup(
    codec_config: CodecConfig,
    corpus: Sequence,
    holdout: Sequence,
    enc_med: MedicalEncoder,
    embedder: IdentityEmbedder,
    device: str,
    output_dir: Optional[str | Path],
) -> _Setup:
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / RESULTS_NAME).unlink(missing_ok=True)
    return _Setup(codec_config, corpus, holdout, enc_med, embedder, device, out)


def run_sweep(
    param: str,
    values: Iterable[float],
    *,
    train_config: TrainConfig,
    codec_config: CodecConfig,
    corpus: Sequence,
    holdout: Sequence,
    enc_med: MedicalEncoder,
    embedder: IdentityEmbedder,
    device: str = "cpu",
    output_dir: Optional[str | Path] = None,
) -> List[SweepRow]:
    """Train once per value of ``lambda_med`` or ``lambda_rev``."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep '{param}' (choose from {', '.join(SWEEP_PARAMS)})", key="sweep.param")
    setup = _setup(codec_config, corpus, holdout, enc_med, embedder, device, output_dir)
    rows = []
    for value in values:
        weights = replace(train_config.weights, **{param: float(value)})
        config = replace(train_config, weights=weights)
        rows.append(_run_one(setup, f"{param}={value:g}", {param: float(value)}, codec_config, config))
    return rows


def run_ablation(
    *,
    train_config: TrainConfig,
    codec_config: CodecConfig,
    corpus: Sequence,
    holdout: Sequence,
    enc_med: MedicalEncoder,
    embedder: IdentityEmbedder,
    grid: Sequence[tuple[bool, bool]] = ABLATION_GRID,
    device: str = "cpu",
    output_dir: Optional[str | Path] = None,
) -> List[SweepRow]:
    """Train once per (use_med_feature, use_med_loss) pair."""
    setup = _setup(codec_config, corpus, holdout, enc_med, embedder, device, output_dir)
    rows = []
    for use_feature, use_loss in grid:
        label = f"feature={'on' if use_feature else 'off'},loss={'on' if use_loss else 'off'}"
        rows.append(
            _run_one(
                setup,
                label,
                {"use_med_feature": use_feature, "use_med_loss": use_loss},
                replace(codec_config, use_med_feature=use_feature),
                replace(train_config, use_med_loss=use_loss),
            )
        )
    return rows


def render_rows(rows: Sequence[SweepRow]) -> str:
    headers = ["Setting", "ID-Dis enc", "ID-Dis rec", "Med dist", "PSNR right", "PSNR wrong"]
    body = [
        [
            row.label,
            f"{row.probe.id_dis_enc:.4f}",
            f"{row.probe.id_dis_hat:.4f}",
            f"{row.probe.med_distance:.4f}",
            f"{row.probe.psnr_right:.2f}",
            f"{row.probe.psnr_wrong:.2f}",
        ]
        for row in rows
    ]
    return format_table(headers, body)
