"""Experiment configuration: defaults, YAML files, and CLI overrides.

Precedence is defaults < config file < `--set` overrides. The fully
defaulted configuration is deliberately small — tiny synthetic dataset,
compact CNN backbone, 64 px inputs — so the end-to-end chain doubles as
a quick smoke test on an ordinary CPU. A config file scales any of it
back up (e.g. `model.backbone: resnet18`, `crop.model_input_px: 224`
for the full-size setup).

Every stage derives its own seed from the root seed, so runs are
reproducible end to end while stages stay statistically independent.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml

from .errors import ConfigurationError
from .finetune import FocalLossConfig, TrainConfig
from .model import RESNET18_FEATURE_DIM, EncoderSpec
from .preprocess import CropSpec
from .pretrain import DistillConfig
from .synth import SynthConfig

_STAGE_CODES = {"synth": 1, "folds": 2, "pretrain": 3, "finetune": 4, "eval": 5}

_DEFAULT_FEATURE_DIMS = {"resnet18": RESNET18_FEATURE_DIM, "small-cnn": 64}


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None  # None -> the synth stage's dataset in this run
    n_folds: int = 5

    def validate(self) -> None:
        if self.n_folds < 2:
            raise ConfigurationError("n_folds must be at least 2")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "small-cnn"
    feature_dim: int | None = None  # None -> the backbone's natural width
    ffn_dim: int = 64

    def encoder_spec(self) -> EncoderSpec:
        feature_dim = self.feature_dim
        if feature_dim is None:
            if self.backbone not in _DEFAULT_FEATURE_DIMS:
                raise ConfigurationError(f"unknown backbone {self.backbone!r}")
            feature_dim = _DEFAULT_FEATURE_DIMS[self.backbone]
        spec = EncoderSpec(backbone=self.backbone, feature_dim=feature_dim, ffn_dim=self.ffn_dim)
        spec.validate()
        return spec


@dataclass(frozen=True)
class PretrainOptions:
    enabled: bool = True
    corpus: str | None = None  # directory of images; None -> this run's synth images
    checkpoint: str | None = None  # reuse an existing encoder checkpoint
    distill: DistillConfig = field(default_factory=DistillConfig)


@dataclass(frozen=True)
class FinetuneOptions:
    train: TrainConfig = field(default_factory=TrainConfig)
    focal: FocalLossConfig = field(default_factory=FocalLossConfig)


@dataclass(frozen=True)
class EvalOptions:
    threshold: float = 0.5
    variants: tuple[str, ...] = ("ours", "no_pretrain", "no_focal", "local_only")
    plots: bool = True

    def validate(self) -> None:
        if not (0.0 < self.threshold < 1.0):
            raise ConfigurationError("eval threshold must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str = "dev"
    seed: int = 0
    test_mode: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    crop: CropSpec = field(default_factory=lambda: CropSpec(patch_size_px=32, model_input_px=64))
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainOptions = field(default_factory=PretrainOptions)
    finetune: FinetuneOptions = field(default_factory=FinetuneOptions)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def validate(self) -> None:
        if not self.run_id:
            raise ConfigurationError("run_id must be non-empty")
        self.data.validate()
        self.synth.validate()
        self.crop.validate()
        self.model.encoder_spec()
        self.pretrain.distill.validate()
        self.finetune.train.validate()
        self.finetune.focal.validate()
        self.eval.validate()


def derive_seed(root_seed: int, stage: str, index: int = 0) -> int:
    """Independent per-stage seed from the experiment's root seed."""
    if stage not in _STAGE_CODES:
        raise ConfigurationError(f"unknown stage {stage!r}; expected one of {sorted(_STAGE_CODES)}")
    return int(np.random.SeedSequence([root_seed, _STAGE_CODES[stage], index]).generate_state(1)[0])


def apply_test_mode(config: ExperimentConfig) -> None:
    """Pin torch to deterministic kernels and a single thread."""
    if config.test_mode:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _coerce(value: Any, default: Any) -> Any:
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, Path) and isinstance(value, str):
        return Path(value)
    return value


def _build(cls: type, raw: dict, where: str) -> Any:
    if not isinstance(raw, dict):
        raise ConfigurationError(f"section {where!r} must be a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigurationError(f"unknown key(s) {unknown} in {where!r}")
    kwargs = {}
    for name, value in raw.items():
        kwargs[name] = _coerce(value, _field_default(cls, name))
    return cls(**kwargs)


def _field_default(cls: type, name: str) -> Any:
    for f in dataclasses.fields(cls):
        if f.name == name:
            if f.default is not dataclasses.MISSING:
                return f.default
            if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
                return f.default_factory()  # type: ignore[misc]
    return None


_NESTED_SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "synth": SynthConfig,
    "crop": CropSpec,
    "model": ModelConfig,
    "pretrain": PretrainOptions,
    "finetune": FinetuneOptions,
    "eval": EvalOptions,
}

_NESTED_SUBSECTIONS: dict[str, dict[str, type]] = {
    "pretrain": {"distill": DistillConfig},
    "finetune": {"train": TrainConfig, "focal": FocalLossConfig},
}


def build_config(raw: dict) -> ExperimentConfig:
    """Raw mapping (from YAML or overrides) -> validated ExperimentConfig."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top_fields)
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s) {unknown}")
    kwargs: dict[str, Any] = {}
    for name, value in raw.items():
        if name in _NESTED_SECTIONS:
            section_cls = _NESTED_SECTIONS[name]
            subsections = _NESTED_SUBSECTIONS.get(name, {})
            if subsections and isinstance(value, dict):
                sub_kwargs = {}
                flat = dict(value)
                for sub_name, sub_cls in subsections.items():
                    if sub_name in flat:
                        sub_kwargs[sub_name] = _build(sub_cls, flat.pop(sub_name), f"{name}.{sub_name}")
                built = _build(section_cls, flat, name)
                kwargs[name] = dataclasses.replace(built, **sub_kwargs)
            else:
                kwargs[name] = _build(section_cls, value, name)
        else:
            kwargs[name] = value
    config = ExperimentConfig(**kwargs)
    config.validate()
    return config


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Load a YAML config (or pure defaults) and apply `--set a.b.c=value` overrides."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must contain a mapping")
        raw = loaded
    for item in overrides or []:
        _apply_override(raw, item)
    return build_config(raw)


def _apply_override(raw: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} must look like section.key=value")
    dotted, _, value_text = item.partition("=")
    keys = dotted.strip().split(".")
    if not all(keys):
        raise ConfigurationError(f"override {item!r} has an empty path component")
    value = yaml.safe_load(value_text)
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {item!r} descends into a non-mapping value")
    node[keys[-1]] = value


def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, Path):
        return str(value)
    return value


def resolved_config_yaml(config: ExperimentConfig) -> str:
    """Canonical YAML dump of the fully resolved configuration."""
    return yaml.safe_dump(_plain(config), sort_keys=True)
