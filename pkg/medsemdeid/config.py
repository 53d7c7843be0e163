"""Run configuration: YAML file -> nested dataclasses.

Unknown keys are rejected with their dotted path; missing keys take the
dataclass defaults.
"""
from __future__ import annotations

import logging
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .codec import CodecConfig
from .errors import ConfigError
from .labels import DISEASE_CODES, GENDERS
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.yaml"


@dataclass
class MedEncoderConfig:
    backend: str = "diffusion-truncated"
    weights: Optional[str] = None
    seed: int = 0
    options: Dict[str, Any] = field(default_factory=dict)


@dataclass
class EmbedderConfig:
    kind: str = "projection"
    name: Optional[str] = None
    weights: Optional[str] = None
    options: Dict[str, Any] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.name or self.kind


@dataclass
class EvalConfig:
    embedders: List[EmbedderConfig] = field(default_factory=list)
    split: str = "val"
    batch_size: int = 8
    seed: int = 0
    classifier: Optional[str] = None
    classifier_options: Dict[str, Any] = field(default_factory=dict)
    segmenter: Optional[str] = None
    segmenter_options: Dict[str, Any] = field(default_factory=dict)
    perceptual: Optional[str] = None
    perceptual_options: Dict[str, Any] = field(default_factory=dict)
    matching_threshold: Optional[float] = None
    false_accept_rate: float = 0.01
    ratings_original: Optional[str] = None
    ratings_deid: Optional[str] = None


@dataclass
class TargetsConfig:
    disease: Dict[str, float] = field(default_factory=lambda: {c: 1.0 / len(DISEASE_CODES) for c in DISEASE_CODES})
    gender: Dict[str, float] = field(default_factory=lambda: {g: 1.0 / len(GENDERS) for g in GENDERS})
    ages: List[float] = field(default_factory=lambda: [float(a) for a in range(20, 81, 5)])
    ages_file: Optional[str] = None


@dataclass
class ClientConfig:
    kind: str = "noise"
    endpoint: Optional[str] = None
    timeout: float = 60.0
    retries: int = 3
    token_env: Optional[str] = None


@dataclass
class ForgeConfig:
    n: int = 100
    planner: str = "guided"
    targets: TargetsConfig = field(default_factory=TargetsConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    references: Optional[str] = None
    gallery_dir: Optional[str] = None
    embedders: List[EmbedderConfig] = field(default_factory=list)
    threshold: Optional[float] = None
    thresholds: Dict[str, float] = field(default_factory=dict)
    false_reject_rate: float = 0.01
    parallelism: int = 4
    retry_budget: int = 3
    max_age_gap: float = 10.0
    estimator: str = "stub"

    def __post_init__(self) -> None:
        if self.planner not in ("guided", "random"):
            raise ConfigError(f"must be 'guided' or 'random', got '{self.planner}'", key="forge.planner")
        if self.n < 1:
            raise ConfigError("must be >= 1", key="forge.n")
        if self.parallelism < 1:
            raise ConfigError("must be >= 1", key="forge.parallelism")
        labels = [section.label for section in self.embedders]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"embedder labels must be unique, got {labels}", key="forge.embedders")
        unknown = sorted(set(self.thresholds) - set(labels))
        if self.embedders and unknown:
            raise ConfigError(f"no embedder named {unknown} (known: {labels})", key="forge.thresholds")


@dataclass
class IOConfig:
    output_dir: str = "runs/default"
    corpus: str = "synthetic"
    manifest: Optional[str] = None
    seed: int = 0
    device: str = "cpu"
    synthetic_samples: int = 512
    synthetic_identities: int = 32
    holdout_samples: int = 32

    def __post_init__(self) -> None:
        if self.corpus not in ("synthetic", "manifest"):
            raise ConfigError(f"must be 'synthetic' or 'manifest', got '{self.corpus}'", key="io.corpus")


@dataclass
class RunConfig:
    model: CodecConfig = field(default_factory=CodecConfig)
    med_encoder: MedEncoderConfig = field(default_factory=MedEncoderConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    forge: ForgeConfig = field(default_factory=ForgeConfig)
    io: IOConfig = field(default_factory=IOConfig)


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _coerce(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None:
            return None
        inner = [arg for arg in typing.get_args(tp) if arg is not type(None)]
        return _coerce(inner[0], value, path)
    if is_dataclass(tp):
        return build_dataclass(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError("expected a list", key=path)
        (item,) = typing.get_args(tp) or (Any,)
        return [_coerce(item, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError("expected a mapping", key=path)
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key=path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key=path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key=path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key=path)
        return value
    return value


def build_dataclass(cls: type, data: Any, path: str = "") -> Any:
    """Recursively build ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", key=path or None)
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key (known: {', '.join(sorted(known))})", key=_join(path, str(key)))
    kwargs = {name: _coerce(hints[name], value, _join(path, name)) for name, value in data.items()}
    return cls(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return build_dataclass(RunConfig, data)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(asdict(config), sort_keys=False)


def write_resolved(config: RunConfig, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RESOLVED_CONFIG
    path.write_text(dump_config(config), encoding="utf-8")
    return path
