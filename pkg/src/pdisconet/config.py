"""Flat experiment configuration with a plain-text ``key = value`` format.

One file describes a whole run: dataset generation, model shape, training
schedule, loss weights and ablation switches. Unknown keys are rejected so
that a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .synthgen import GlyphSpec
from .trainer import TrainConfig


@dataclass
class ExperimentConfig:
    # dataset
    data_seed: int = 0
    num_samples: int = 2500
    train_fraction: float = 0.8
    image_size: int = 64
    occlude_prob: float = 0.0
    # model
    num_parts: int = 4
    widths: tuple[int, ...] = (16, 32, 32, 32)
    downsample: tuple[bool, ...] = (True, True, False, False)
    norm: str = "none"
    pooling_norm: str = "area"
    model_seed: int = 0
    # optimisation
    lr_backbone: float = 1e-4
    lr_head: float = 1e-3
    lr_modulation: float = 1e-2
    decay_factor: float = 0.5
    decay_period: int = 5
    num_decays: int = 5
    batch_size: int = 16
    epochs: int = 30
    pretrain_epochs: int = 8
    pretrain_lr: float = 1e-3
    calibration_target: float = 1.0
    dropout_rate: float = 0.3
    grad_clip: float = 10.0
    max_angle_deg: float = 30.0
    max_shift: float = 0.1
    min_scale: float = 0.9
    max_scale: float = 1.1
    eval_size: int = 500
    train_seed: int = 0
    # loss weights
    lambda_class: float = 1.0
    lambda_conc: float = 1000.0
    lambda_orth: float = 1.0
    lambda_equiv: float = 1.0
    lambda_pres: float = 1.0
    # ablations
    no_class: bool = False
    no_conc: bool = False
    no_orth: bool = False
    no_equiv: bool = False
    no_pres: bool = False
    no_modulation: bool = False
    no_dropout: bool = False
    include_background: bool = True
    # outputs
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.num_samples < 1:
            raise ConfigError("num_samples must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        # surface component-level validation at load time
        self.model_config()
        self.train_config()
        self.glyph_spec()

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        return ModelConfig(
            num_parts=self.num_parts,
            num_classes=num_classes if num_classes is not None else self.glyph_spec().num_classes,
            widths=self.widths,
            downsample=self.downsample,
            pooling_norm=self.pooling_norm,
            use_modulation=not self.no_modulation,
            norm=self.norm,
            seed=self.model_seed,
        )

    def train_config(self) -> TrainConfig:
        weights = LossWeights(self.lambda_class, self.lambda_conc, self.lambda_orth,
                              self.lambda_equiv, self.lambda_pres)
        shared = {f.name for f in fields(TrainConfig)} & {f.name for f in fields(self)}
        return TrainConfig(weights=weights, seed=self.train_seed, **{k: getattr(self, k) for k in shared})

    def glyph_spec(self) -> GlyphSpec:
        return GlyphSpec(image_size=self.image_size, occlude_prob=self.occlude_prob)

    # -- text format -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            try:
                values[key] = _parse(value, known[key].default)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        try:
            return cls(**values)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, str(path))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse(text: str, default):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if not items:
            raise ValueError("empty list")
        return tuple(_parse(t, default[0]) for t in items)
    return text
