"""Experiment configuration: nested sections, strict parsing, stable hashing.

Unknown keys are rejected so typos cannot silently fall back to defaults.
The hash covers the resolved configuration dict, so two configs hash equal
exactly when every semantically meaningful field agrees.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from pisa.errors import ConfigError

STRATEGIES = ("R", "H", "P")


@dataclass
class DataConfig:
    """Synthetic scene generator parameters."""

    classes: int = 3
    image_size: float = 128.0
    gts_per_image: int = 4
    proposals_per_gt: int = 8
    background_per_image: int = 32
    min_gt_size: float = 16.0
    max_gt_size: float = 48.0
    jitter: float = 0.25
    feature_noise: float = 0.45
    align_noise: float = 0.25
    loc_noise: float = 0.15
    n_train_scenes: int = 200
    n_eval_scenes: int = 50

    def validate(self):
        if self.classes < 1:
            raise ConfigError("data.classes must be >= 1")
        if not 0.0 < self.min_gt_size <= self.max_gt_size:
            raise ConfigError("data: require 0 < min_gt_size <= max_gt_size")
        if self.max_gt_size > self.image_size:
            raise ConfigError("data: ground-truth boxes cannot fit the image extent")
        if min(self.gts_per_image, self.proposals_per_gt) < 1 or self.background_per_image < 0:
            raise ConfigError("data: counts out of range")
        if min(self.jitter, self.feature_noise, self.align_noise, self.loc_noise) < 0:
            raise ConfigError("data: noise scales must be >= 0")
        if self.n_train_scenes < 1 or self.n_eval_scenes < 1:
            raise ConfigError("data: scene counts must be >= 1")


@dataclass
class ModelConfig:
    init_scale: float = 0.01

    def validate(self):
        if self.init_scale <= 0:
            raise ConfigError("model.init_scale must be > 0")


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.5
    batch_scenes: int = 4
    seed: int = 0
    grad_clip: float = 5.0

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.lr <= 0 or self.batch_scenes < 1 or self.grad_clip <= 0:
            raise ConfigError("train: lr, batch_scenes, grad_clip out of range")


@dataclass
class SamplingConfig:
    """Per-side sampling strategy plus the shared batch quota.

    "R" draws uniformly, "H" mines the top-loss samples, and "P" keeps every
    candidate on that side and relies on soft reweighting instead of
    selection. The quota is per image: ``pos_fraction`` of it may be
    positives, negatives fill the remainder.
    """

    pos: str = "R"
    neg: str = "R"
    samples_per_image: int = 32
    pos_fraction: float = 0.25

    def validate(self):
        if self.pos not in STRATEGIES or self.neg not in STRATEGIES:
            raise ConfigError(f"sampling strategies must be one of {STRATEGIES}")
        if self.samples_per_image < 1:
            raise ConfigError("sampling.samples_per_image must be >= 1")
        if not 0.0 <= self.pos_fraction <= 1.0:
            raise ConfigError("sampling.pos_fraction must lie in [0, 1]")


@dataclass
class IsrConfig:
    """Importance reweighting parameters; ``enable_*`` of None follows the
    sampling strategy letter (enabled exactly for the "P" side)."""

    gamma_pos: float = 2.0
    beta_pos: float = 0.0
    gamma_neg: float = 0.5
    beta_neg: float = 0.0
    enable_pos: bool | None = None
    enable_neg: bool | None = None
    cluster_iou: float = 0.7

    def validate(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ConfigError("isr: gamma must be >= 0")
        if not (0.0 <= self.beta_pos < 1.0 and 0.0 <= self.beta_neg < 1.0):
            raise ConfigError("isr: beta must lie in [0, 1)")
        if not 0.0 < self.cluster_iou < 1.0:
            raise ConfigError("isr.cluster_iou must lie in (0, 1)")


@dataclass
class CarlConfig:
    """Classification-aware regression loss; ``enable`` of None follows the
    positive sampling strategy letter."""

    k: float = 1.0
    b: float = 0.2
    enable: bool | None = None
    weight: float = 1.0

    def validate(self):
        if self.k <= 0:
            raise ConfigError("carl.k must be > 0")
        if not 0.0 <= self.b < 1.0:
            raise ConfigError("carl.b must lie in [0, 1)")
        if self.weight < 0:
            raise ConfigError("carl.weight must be >= 0")


@dataclass
class EvalSettings:
    thetas: list = field(default_factory=lambda: [round(0.5 + 0.05 * i, 2) for i in range(10)])
    nms_thr: float = 0.5
    score_thr: float = 0.05
    max_dets: int = 100

    def validate(self):
        if not self.thetas or any(not 0.0 < t <= 1.0 for t in self.thetas):
            raise ConfigError("eval.thetas must be IoU thresholds in (0, 1]")
        if not 0.0 < self.nms_thr < 1.0:
            raise ConfigError("eval.nms_thr must lie in (0, 1)")
        if not 0.0 <= self.score_thr < 1.0 or self.max_dets < 1:
            raise ConfigError("eval: score_thr / max_dets out of range")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    isr: IsrConfig = field(default_factory=IsrConfig)
    carl: CarlConfig = field(default_factory=CarlConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def validate(self) -> "ExperimentConfig":
        for section in dataclasses.fields(self):
            getattr(self, section.name).validate()
        return self

    # resolved toggles: strategy letter "P" implies the soft components
    def isr_pos_enabled(self) -> bool:
        if self.isr.enable_pos is None:
            return self.sampling.pos == "P"
        return self.isr.enable_pos

    def isr_neg_enabled(self) -> bool:
        if self.isr.enable_neg is None:
            return self.sampling.neg == "P"
        return self.isr.enable_neg

    def carl_enabled(self) -> bool:
        if self.carl.enable is None:
            return self.sampling.pos == "P"
        return self.carl.enable

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, fld in sections.items():
            section_cls = fld.default_factory
            value = raw.get(name, {})
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{name}' must be an object")
            kwargs[name] = _section_from_dict(section_cls, name, value)
        return cls(**kwargs).validate()

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """New config with dotted-key overrides applied, e.g. {"isr.gamma_pos": 1.0}."""
        d = self.to_dict()
        for key, value in overrides.items():
            section, _, leaf = key.partition(".")
            if not leaf or section not in d or leaf not in d[section]:
                raise ConfigError(f"unknown config key '{key}'")
            d[section][leaf] = value
        return ExperimentConfig.from_dict(d)


def _section_from_dict(section_cls, name: str, value: dict):
    fields = {f.name: f for f in dataclasses.fields(section_cls)}
    unknown = set(value) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in config section '{name}': {sorted(unknown)}")
    kwargs = {}
    for key, v in value.items():
        expected = fields[key].type
        if v is not None and expected in ("int",) and isinstance(v, bool):
            raise ConfigError(f"{name}.{key}: expected int, got bool")
        kwargs[key] = v
    try:
        return section_cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section '{name}': {exc}") from exc


def canonical_json(payload) -> str:
    """Stable serialization: sorted keys, no whitespace variance."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(config: ExperimentConfig) -> str:
    """Short stable hash of the resolved configuration."""
    return hashlib.sha256(canonical_json(config.to_dict()).encode("utf-8")).hexdigest()[:12]


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")
