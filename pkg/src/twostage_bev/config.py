"""Experiment configuration: dataclasses backed by an INI file.

Sections: [data], [model], [train], [ablation], [eval].  Unknown keys are
rejected so typos fail loudly; missing keys take the defaults below.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .scene_sim import SceneConfig

ARMS = ("perspective_only", "bev_only", "perspective_and_bev", "bev_and_bev")
FLAGS = ("ida", "long_interval", "bidirectional")
ARM_TITLES = {"perspective_only": "Perspective Only", "bev_only": "BEV Only",
              "perspective_and_bev": "Perspective & BEV", "bev_and_bev": "BEV & BEV"}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig(SceneConfig):
    eval_sequences: int = 2
    eval_seed_offset: int = 1000

    def scene_config(self, held_out: bool = False) -> SceneConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(SceneConfig)}
        if held_out:
            kw["num_sequences"] = self.eval_sequences
            kw["seed"] = self.seed + self.eval_seed_offset
        return SceneConfig(**kw)


@dataclass
class ModelConfig:
    backbone_width: int = 32
    blocks_per_stage: int = 2
    channels: int = 64
    bev_h: int = 50
    bev_w: int = 50
    z_anchors: tuple = (-1.0, 1.0 / 3.0, 5.0 / 3.0, 3.0)
    encoder_layers: int = 3
    encoder_points: int = 4
    decoder_layers: int = 3
    decoder_points: int = 4
    num_queries: int = 300
    aux_decoder_layers: int = 1
    num_history: int = 4
    fusion_blocks: int = 2
    head_tower_convs: int = 1
    dtype: str = "float64"


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 4e-4
    weight_decay: float = 0.01
    warmup_steps: int = 100
    decay_at: tuple = (0.8,)  # fractions of ``steps``
    decay_gamma: float = 0.1
    grad_clip: float = 35.0
    lambda_bev: float = 1.0
    lambda_pers: float = 1.0
    checkpoint_every: int = 200
    loss_threshold: float = 0.0  # early stop once a running mean of L_total falls below; 0 disables
    eval_every: int = 0  # periodic training-set mAP check; 0 disables
    target_map: float = 0.0  # early stop once the periodic check reaches this mAP@1m
    seed: int = 0


@dataclass
class AblationConfig:
    arm: str = "perspective_and_bev"
    ida: bool = False
    long_interval: bool = False
    bidirectional: bool = False
    history_interval: float = 0.5
    long_history_interval: float = 2.0


@dataclass
class EvalConfig:
    pers_nms_iou: float = 0.75
    bev_nms_iou: float = 0.3
    k1: int = 100
    k2: int = 100
    thresholds: tuple = (0.5, 1.0, 2.0, 4.0)
    proposal_score_thresh: float = 0.05
    proposal_candidates: int = 100  # per view, before NMS
    score_thresh: float = 0.05
    max_detections: int = 100
    plots: bool = True


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        try:
            self.data.validate()
        except ValueError as exc:
            raise ConfigError(f"[data] {exc}") from None
        if self.ablation.arm not in ARMS:
            raise ConfigError(f"unknown arm {self.ablation.arm!r}; expected one of {ARMS}")
        if self.model.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.model.dtype!r}")
        if self.train.steps < 0 or self.train.warmup_steps < 0:
            raise ConfigError("steps and warmup_steps must be >= 0")
        if self.model.num_history < 0:
            raise ConfigError("num_history must be >= 0")
        if self.data.image_width % 128 or self.data.image_height % 128:
            raise ConfigError("image size must be divisible by 128")
        return self

    def loss_weights(self) -> tuple[float, float]:
        """(lambda_bev, lambda_pers) after the arm overrides."""
        arm = self.ablation.arm
        lb = 0.0 if arm == "perspective_only" else self.train.lambda_bev
        lp = 0.0 if arm in ("bev_only", "bev_and_bev") else self.train.lambda_pers
        return lb, lp

    def with_overrides(self, arm: str | None = None, flags=None, seed: int | None = None) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, ablation=dataclasses.replace(self.ablation),
                                  train=dataclasses.replace(self.train))
        if arm is not None:
            cfg.ablation.arm = arm
        if flags is not None:
            for f in FLAGS:
                setattr(cfg.ablation, f, f in flags)
            unknown = set(flags) - set(FLAGS)
            if unknown:
                raise ConfigError(f"unknown flags {sorted(unknown)}; expected a subset of {FLAGS}")
        if seed is not None:
            cfg.train = dataclasses.replace(cfg.train, seed=seed)
        return cfg.validate()


SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig,
            "ablation": AblationConfig, "eval": EvalConfig}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(text: str, default, name: str):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text.strip()
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def to_ini(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
    from io import StringIO
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_ini(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    unknown_sections = set(parser.sections()) - set(SECTIONS)
    if unknown_sections:
        raise ConfigError(f"unknown sections {sorted(unknown_sections)}")
    parts = {}
    for section, cls in SECTIONS.items():
        default = cls()
        known = {f.name for f in fields(cls)}
        values = {}
        if parser.has_section(section):
            for key, text_value in parser[section].items():
                if key not in known:
                    raise ConfigError(f"unknown key [{section}] {key}")
                values[key] = _parse(text_value, getattr(default, key), f"[{section}] {key}")
        parts[section] = dataclasses.replace(default, **values)
    return ExperimentConfig(**parts).validate()


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return from_ini(p.read_text())


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(to_ini(cfg))
