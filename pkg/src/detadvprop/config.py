"""Run configuration: detector, attack and training settings.

Configs are stored as a flat ``key = value`` text document where every key is
qualified by its section (``model.*``, ``attack.*``, ``train.*``). Values are
Python literals; bare words are read as strings.
"""

import ast
import dataclasses
import math
from dataclasses import dataclass, field, fields
from typing import Optional, Tuple


class ConfigError(ValueError):
    pass


VARIANTS = ("vanilla", "det_advprop", "cls", "loc", "det", "three_bn")
ATTACK_MODES = ("targeted", "nontargeted")
ATTACK_SOURCES = ("cls", "loc", "det", "maxmax")
TARGET_SCOPES = ("all_anchors", "object_anchors")
BN_MODES = ("frozen", "batch")

# Number of batch-norm branches and the attack source each variant trains with.
VARIANT_BRANCHES = {"vanilla": 1, "det_advprop": 2, "cls": 2, "loc": 2, "det": 2, "three_bn": 3}
VARIANT_SOURCE = {"det_advprop": "maxmax", "cls": "cls", "loc": "loc", "det": "det"}


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 3
    in_channels: int = 3
    widths: Tuple[int, ...] = (16, 32, 64, 64)
    stage_depth: int = 1
    head_width: int = 48
    head_depth: int = 2
    strides: Tuple[int, ...] = (8, 16)
    anchor_scale: float = 2.0
    scales: Tuple[float, ...] = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
    ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    loss_weight: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 1.5
    huber_delta: float = 0.1
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    bn_branches: int = 1
    bn_eps: float = 1e-3
    bn_decay: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.loss_weight < 0:
            raise ConfigError("loss_weight must be >= 0")
        if self.stage_depth < 1 or self.head_depth < 0:
            raise ConfigError("stage_depth must be >= 1 and head_depth >= 0")
        if self.bn_branches not in (1, 2, 3):
            raise ConfigError("bn_branches must be 1, 2 or 3")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta must be > 0")
        if not 0 <= self.neg_iou <= self.pos_iou <= 1:
            raise ConfigError("need 0 <= neg_iou <= pos_iou <= 1")
        if not self.widths or not self.strides or not self.scales or not self.ratios:
            raise ConfigError("widths, strides, scales and ratios must be non-empty")
        stage_strides = self.stage_strides
        for stride in self.strides:
            if stride not in stage_strides:
                raise ConfigError(
                    f"stride {stride} is not produced by the backbone (stage strides {stage_strides})"
                )
        if list(self.strides) != sorted(set(self.strides)):
            raise ConfigError("strides must be strictly increasing")

    @property
    def stage_strides(self):
        return tuple(2 ** (i + 1) for i in range(len(self.widths)))

    @property
    def anchors_per_cell(self):
        return len(self.scales) * len(self.ratios)


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "nontargeted"
    source: str = "maxmax"
    epsilon: float = 1.0
    random_init: bool = True
    target_scope: str = "all_anchors"
    epsilon_object: Optional[float] = None
    epsilon_background: Optional[float] = None
    bn_mode: str = "frozen"

    def __post_init__(self):
        if self.mode not in ATTACK_MODES:
            raise ConfigError(f"attack mode must be one of {ATTACK_MODES}, got {self.mode!r}")
        if self.source not in ATTACK_SOURCES:
            raise ConfigError(f"attack source must be one of {ATTACK_SOURCES}, got {self.source!r}")
        if self.target_scope not in TARGET_SCOPES:
            raise ConfigError(f"target_scope must be one of {TARGET_SCOPES}")
        if self.bn_mode not in BN_MODES:
            raise ConfigError(f"bn_mode must be one of {BN_MODES}")
        if not self.epsilon >= 0:
            raise ConfigError("epsilon must be >= 0")
        if (self.epsilon_object is None) != (self.epsilon_background is None):
            raise ConfigError("epsilon_object and epsilon_background must be set together")
        if self.region_weighted and (self.epsilon_object < 0 or self.epsilon_background < 0):
            raise ConfigError("region strengths must be >= 0")

    @property
    def region_weighted(self):
        return self.epsilon_object is not None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    base_lr: float = 32.0
    warmup_epochs: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 4e-5
    # gradients are rescaled to at most this global L2 norm; None disables it
    grad_clip_norm: Optional[float] = 0.01
    variant: str = "det_advprop"
    seed: int = 0
    hflip: bool = True
    jitter_min: float = 1.0
    jitter_max: float = 1.0
    model: DetectorConfig = field(default_factory=DetectorConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ConfigError("grad_clip_norm must be > 0 or None")
        if not 0 < self.jitter_min <= self.jitter_max:
            raise ConfigError("need 0 < jitter_min <= jitter_max")
        branches = VARIANT_BRANCHES[self.variant]
        if self.model.bn_branches != branches:
            object.__setattr__(self, "model", dataclasses.replace(self.model, bn_branches=branches))
        source = VARIANT_SOURCE.get(self.variant)
        if source is not None and self.attack.source != source:
            object.__setattr__(self, "attack", dataclasses.replace(self.attack, source=source))


_SECTIONS = {"train": TrainConfig, "model": DetectorConfig, "attack": AttackConfig}


def parse_value(text):
    text = text.strip()
    if text.lower() in ("none", "null"):
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
    if isinstance(value, list):
        value = tuple(value)
    return value


def parse_flat(text):
    """Parse ``key = value`` lines into a dict. ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def _field_names(cls):
    return {f.name for f in fields(cls)} - {"model", "attack"}


def train_config_from_dict(values):
    """Build a TrainConfig from flat ``section.key`` entries. Unknown keys are an error."""
    grouped = {name: {} for name in _SECTIONS}
    for key, value in values.items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS or name not in _field_names(_SECTIONS[section]):
            raise ConfigError(f"unknown config key {key!r}")
        grouped[section][name] = value
    try:
        model = DetectorConfig(**grouped["model"])
        attack = AttackConfig(**grouped["attack"])
        return TrainConfig(model=model, attack=attack, **grouped["train"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_train_config(path, overrides=None):
    with open(path, "r", encoding="utf-8") as fh:
        values = parse_flat(fh.read())
    values.update(overrides or {})
    return train_config_from_dict(values)


def _format_value(value):
    if isinstance(value, float) and math.isfinite(value):
        return repr(value)
    if isinstance(value, tuple):
        return "(" + ", ".join(_format_value(v) for v in value) + ("," if len(value) == 1 else "") + ")"
    return repr(value)


def to_flat(config):
    """Flatten a TrainConfig into ``section.key`` entries (inverse of train_config_from_dict)."""
    out = {}
    for name in sorted(_field_names(TrainConfig)):
        out[f"train.{name}"] = getattr(config, name)
    for section, obj in (("model", config.model), ("attack", config.attack)):
        for f in fields(obj):
            out[f"{section}.{f.name}"] = getattr(obj, f.name)
    return out


def dump_flat(config):
    return "".join(f"{key} = {_format_value(value)}\n" for key, value in to_flat(config).items())


def detector_config_to_dict(config):
    return {f.name: list(v) if isinstance(v := getattr(config, f.name), tuple) else v for f in fields(config)}


def detector_config_from_dict(values):
    return DetectorConfig(**values)
