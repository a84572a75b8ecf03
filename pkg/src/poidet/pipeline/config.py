"""Configuration for the end-to-end pipeline.

A single TOML document with dotted sections configures every stage; every
hyperparameter has a key here, and the defaults reproduce the reference
training recipe (one-cycle schedule 3e-4 -> 3e-3 -> 3e-6, momentum 0.95/0.85,
weight decay 0.01, focal alpha 0.25 / gamma 2.0, loss weights 1/2/0.2,
two-stage matching at 0.6/0.45 and 0.6/0.55, proposal path 1000 -> NMS 0.5 ->
300, n = 2 key-points per edge, 512-wide refinement FC layers). Unknown
sections or keys are rejected at load time, as are invalid switch
combinations.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from ..pillars import PillarGridSpec
from ..targets import AssignmentConfig, LossWeights
from ..kernels.optim import ScheduleConfig

RROI_MODES = ("off", "4x4", "8x4")


class ConfigError(ValueError):
    """Raised for malformed, unknown, or inconsistent configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Network widths and second-stage sampling parameters."""

    pfn_channels: int = 16
    mid_channels: int = 24
    out_channels: int = 32
    n_keypoints: int = 2
    fc_width: int = 512
    rroi_samples: int = 4

    def __post_init__(self):
        if min(self.pfn_channels, self.mid_channels, self.out_channels,
               self.fc_width) < 1:
            raise ConfigError("channel widths must be >= 1")
        if self.n_keypoints < 0:
            raise ConfigError("n_keypoints must be >= 0")
        if self.rroi_samples not in (1, 4):
            raise ConfigError("rroi_samples must be 1 or 4")


@dataclass(frozen=True)
class AblationSwitches:
    """On/off state of the second stage and its three components.

    Valid states: everything off (stage-one baseline); the pooled-point
    second stage (``poi_pool`` on, optionally ``visibility`` and/or
    ``adaptive``); or the rotated-RoI comparison second stage (``rroi``
    "4x4"/"8x4", which excludes the point path and its gates).
    """

    second_stage: bool = True
    poi_pool: bool = True
    visibility: bool = True
    adaptive: bool = True
    rroi: str = "off"

    def __post_init__(self):
        if self.rroi not in RROI_MODES:
            raise ConfigError("rroi must be one of %s, got %r"
                              % (", ".join(RROI_MODES), self.rroi))
        if self.rroi != "off" and self.poi_pool:
            raise ConfigError("rroi pooling excludes poi_pool")
        if (self.visibility or self.adaptive) and not self.poi_pool:
            raise ConfigError("visibility/adaptive gates require poi_pool")
        if self.second_stage and not (self.poi_pool or self.rroi != "off"):
            raise ConfigError("second_stage needs poi_pool or an rroi mode")
        if not self.second_stage and (self.poi_pool or self.rroi != "off"):
            raise ConfigError("pooling switches require second_stage")

    @property
    def rroi_shape(self) -> tuple[int, int]:
        if self.rroi == "off":
            raise ConfigError("rroi pooling is not enabled")
        rows, cols = self.rroi.split("x")
        return int(rows), int(cols)


@dataclass(frozen=True)
class AssignConfig:
    """Matching thresholds of both stages (positive / negative IoU)."""

    rpn_pos_iou: float = 0.6
    rpn_neg_iou: float = 0.45
    stage2_pos_iou: float = 0.6
    stage2_neg_iou: float = 0.55

    def rpn(self) -> AssignmentConfig:
        return AssignmentConfig(self.rpn_pos_iou, self.rpn_neg_iou)

    def stage2(self) -> AssignmentConfig:
        return AssignmentConfig(self.stage2_pos_iou, self.stage2_neg_iou)


@dataclass(frozen=True)
class LossConfig:
    beta_cls: float = 1.0
    beta_reg: float = 2.0
    beta_dir: float = 0.2
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def weights(self) -> LossWeights:
        return LossWeights(self.beta_cls, self.beta_reg, self.beta_dir)


@dataclass(frozen=True)
class ProposalConfig:
    pre_nms_top: int = 1000
    post_nms_top: int = 300
    nms_iou: float = 0.5

    def __post_init__(self):
        if not 1 <= self.post_nms_top <= self.pre_nms_top:
            raise ConfigError("need 1 <= post_nms_top <= pre_nms_top")
        if not 0.0 < self.nms_iou < 1.0:
            raise ConfigError("nms_iou must lie in (0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    seed: int = 0
    weight_decay: float = 0.01
    beta2: float = 0.999
    eps: float = 1e-8
    lr_start: float = 3e-4
    lr_max: float = 3e-3
    lr_final: float = 3e-6
    rise_frac: float = 0.4
    beta1_hi: float = 0.95
    beta1_lo: float = 0.85

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.lr_start, self.lr_max, self.lr_final,
                              self.rise_frac, self.beta1_hi, self.beta1_lo)


@dataclass(frozen=True)
class InferConfig:
    score_floor: float = 0.05
    final_nms_iou: float = 0.5
    max_detections: int = 100
    pillar_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score_floor < 1.0:
            raise ConfigError("score_floor must lie in [0, 1)")
        if self.max_detections < 1:
            raise ConfigError("max_detections must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple = (0.5, 1.0, 2.0, 4.0)
    recall_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "thresholds",
                           tuple(float(t) for t in self.thresholds))
        if not self.thresholds or any(t <= 0 for t in self.thresholds):
            raise ConfigError("thresholds must be positive")


@dataclass(frozen=True)
class AblateConfig:
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("ablate.seeds must not be empty")


@dataclass(frozen=True)
class PathsConfig:
    train_data: str = ""
    val_data: str = ""


@dataclass(frozen=True)
class PipelineConfig:
    grid: PillarGridSpec = field(default_factory=PillarGridSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    switches: AblationSwitches = field(default_factory=AblationSwitches)
    assign: AssignConfig = field(default_factory=AssignConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def replace(self, **sections) -> "PipelineConfig":
        return dataclasses.replace(self, **sections)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "grid": PillarGridSpec,
    "model": ModelConfig,
    "switches": AblationSwitches,
    "assign": AssignConfig,
    "loss": LossConfig,
    "proposals": ProposalConfig,
    "train": TrainConfig,
    "infer": InferConfig,
    "eval": EvalConfig,
    "ablate": AblateConfig,
    "paths": PathsConfig,
}


def _coerce(section: str, fld, value):
    kind = fld.type
    where = "%s.%s" % (section, fld.name)
    if kind in ("int", int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("%s must be an integer, got %r" % (where, value))
        return value
    if kind in ("float", float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("%s must be a number, got %r" % (where, value))
        return float(value)
    if kind in ("bool", bool):
        if not isinstance(value, bool):
            raise ConfigError("%s must be a boolean, got %r" % (where, value))
        return value
    if kind in ("str", str):
        if not isinstance(value, str):
            raise ConfigError("%s must be a string, got %r" % (where, value))
        return value
    if kind in ("tuple", tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError("%s must be an array, got %r" % (where, value))
        return tuple(value)
    raise ConfigError("%s has unsupported config type %r" % (where, kind))


def config_from_dict(doc: dict) -> PipelineConfig:
    """Validate a parsed TOML document and build the config."""
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError("unknown config sections: %s" % ", ".join(unknown))
    built = {}
    for name, cls in _SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError("section [%s] must be a table" % name)
        known = {f.name: f for f in fields(cls)}
        bad = sorted(set(section) - set(known))
        if bad:
            raise ConfigError("unknown keys in [%s]: %s" % (name, ", ".join(bad)))
        kwargs = {k: _coerce(name, known[k], v) for k, v in section.items()}
        try:
            built[name] = cls(**kwargs)
        except ValueError as exc:
            raise ConfigError("invalid [%s] section: %s" % (name, exc))
    return PipelineConfig(**built)


def load_config(path) -> PipelineConfig:
    """Read and validate a TOML config file."""
    path = Path(path)
    try:
        doc = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("%s is not valid TOML: %s" % (path, exc))
    return config_from_dict(doc)


def default_config() -> PipelineConfig:
    return PipelineConfig()
