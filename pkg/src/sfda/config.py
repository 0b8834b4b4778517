"""Run configuration.

A config file is flat ``section.key = value`` text; values are JSON literals
(bare words are read as strings).  ``#`` starts a comment.  The canonical form
(sorted keys, JSON values) is hashed to stamp checkpoints and reports.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ValidationError
from .objectives import LossWeights


@dataclass
class OptimConfig:
    kind: str = "sgd"
    lr: float = 1e-2
    backbone_lr_scale: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    nesterov: bool = True
    gamma: float = 10.0
    power: float = 0.75


@dataclass
class DataConfig:
    root: str | None = None
    image_size: int = 32
    synthetic_samples: int = 500
    synthetic_magnitude: float = 0.9
    synthetic_seed: int = 0


@dataclass
class Stage1Config:
    epochs: int = 15
    batch_size: int = 64
    smoothing: float = 0.1
    holdout: float = 0.2


@dataclass
class Stage2Config:
    epochs: int = 12
    batch_size: int = 64
    plr: bool = True
    plr_alpha: float = 0.9
    cluster_rounds: int = 2
    ema_momentum: float = 0.9
    weak_normalization: str = "softmax"
    weak_ops: list[str] = field(default_factory=lambda: ["hflip", "crop"])
    strong_ops: list[str] = field(default_factory=lambda: ["hflip", "crop", "randaug", "erase"])
    im_baseline: bool = False


@dataclass
class Stage3Config:
    epochs: int = 30
    batch_size: int = 64
    mixup_concentration: float = 0.75
    fixed_lambda: float | None = None
    student_weights: str | None = None


@dataclass
class LossConfig:
    lambda_nm: float = 1.0
    lambda_pl: float = 0.3
    lambda_cons: float = 1.0

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_nm, self.lambda_pl, self.lambda_cons)


@dataclass
class TaskConfig:
    seed: int = 0
    source_domain: str = "source"
    target_domains: list[str] = field(default_factory=lambda: ["rot_color", "color_blur", "rot_noise"])
    num_classes: int = 4
    backbone_id: str = "conv4"
    bottleneck_dim: int = 256
    backbone_weights: str | None = None


@dataclass
class AdaptationConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage2.batch_size < 2:
            raise ValidationError("stage2.batch_size must be >= 2 (batch statistics need two samples)")
        for name in ("stage1", "stage2", "stage3"):
            stage = getattr(self, name)
            if stage.batch_size < 1 or stage.epochs < 0:
                raise ValidationError(f"{name} needs batch_size >= 1 and epochs >= 0")
        if self.optim.lr <= 0 or self.optim.backbone_lr_scale <= 0:
            raise ValidationError("learning rates must be positive")
        if self.optim.kind != "sgd":
            raise ValidationError(f"unsupported optimizer {self.optim.kind!r}")
        if not 0 <= self.stage1.smoothing < 1:
            raise ValidationError("stage1.smoothing must lie in [0, 1)")
        if not 0 <= self.stage2.plr_alpha <= 1:
            raise ValidationError("stage2.plr_alpha must lie in [0, 1]")
        if self.stage3.mixup_concentration <= 0:
            raise ValidationError("stage3.mixup_concentration must be positive")
        self.loss.weights()

    # -- flat key/value form

    def to_flat(self) -> dict[str, Any]:
        flat = {}
        for section in dataclasses.fields(self):
            for f in dataclasses.fields(getattr(self, section.name)):
                flat[f"{section.name}.{f.name}"] = getattr(getattr(self, section.name), f.name)
        return flat

    def canonical(self) -> str:
        return "".join(f"{k} = {json.dumps(v, sort_keys=True)}\n" for k, v in sorted(self.to_flat().items()))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def override(self, **flat) -> "AdaptationConfig":
        """Copy with ``section.key`` overrides (pass as ``{"stage2.epochs": 3}``-style kwargs)."""
        values = self.to_flat()
        for k, v in flat.items():
            if k not in values:
                raise ValidationError(f"unknown config key {k!r}")
            values[k] = v
        return from_flat(values)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.canonical())
        return path


def from_flat(values: dict[str, Any]) -> AdaptationConfig:
    sections: dict[str, dict[str, Any]] = {}
    known = {f.name: f for f in dataclasses.fields(AdaptationConfig)}
    for key, value in values.items():
        section, _, name = key.partition(".")
        if section not in known or not name:
            raise ValidationError(f"unknown config key {key!r}")
        sections.setdefault(section, {})[name] = value
    kwargs = {}
    for section, items in sections.items():
        cls = known[section].default_factory
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(items) - names
        if unknown:
            raise ValidationError(f"unknown config key {section}.{sorted(unknown)[0]}")
        kwargs[section] = cls(**items)
    return AdaptationConfig(**kwargs)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config(text: str) -> AdaptationConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"line {lineno}: expected 'section.key = value'")
        values[key.strip()] = _parse_value(value.strip())
    return from_flat(values)


def load_config(path) -> AdaptationConfig:
    return parse_config(Path(path).read_text())
