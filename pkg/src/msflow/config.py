"""Run configuration: one YAML file, one dataclass per section.

Defaults are the full-scale values. ``profile: toy`` swaps in desk-scale
defaults (64 px images, small backbone, scaled pixel radii) before the
file's own values are applied. Unknown keys and out-of-range values raise
:class:`ConfigError` naming the offending field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .encoder import BackboneConfig, EncoderTrainConfig, alexnet_config, toy_config, vgg_config
from .flownet import FlowNetConfig, FlowTrainConfig
from .miner import MatchConfig, MinerConfig, PyramidConfig
from .msconv import MSConvConfig

TOY_SCALE = 64 / 224


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class DataSection:
    path: str = "data"
    image_size: int = 224


@dataclass
class BackboneSection:
    arch: str = "vgg"                  # vgg | alexnet | toy
    embed_dim: int = 128
    channels: list[int] | None = None  # None keeps the arch default


@dataclass
class MSConvSection:
    enabled: bool = True
    dilations: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    fusion: str = "after_activation"   # after_activation | before_activation
    share_kernel: bool = True


@dataclass
class MiningSection:
    k: int = 10
    budget: int = 80
    candidates: int = 2
    neighbors: int = 5
    lambda_d: float = 1.0
    lambda_s: float = 0.5
    outlier_cost: float = 0.8
    levels: int = 6
    min_side: float = 20.0
    max_side: float = 80.0
    max_iters: int = 30
    encoder_checkpoint: str | None = None
    overlays: bool = False


@dataclass
class EncoderSection:
    epochs: int = 12
    lr: float = 0.01
    momentum: float = 0.9
    margin: float = 1.0
    negatives: int = 60
    radius: float = 32.0
    max_correspondences: int = 64
    augment: bool = True
    checkpoint: str | None = None      # input for train-flow, match, probe, report-weights
    resume: str | None = None


@dataclass
class FlowSection:
    epochs: int = 40
    lr: float = 1e-3
    optimizer: str = "adam"
    gamma: float = 4.0
    mu: float = 1.0
    nu: float = 1.0
    mask_radius: float = 5.0
    loc_pool: str = "flatten"
    squared_feature_loss: bool = False
    joint_encoder: bool = False
    checkpoint: str | None = None      # input for match
    resume: str | None = None


@dataclass
class MatchSection:
    mode: str = "flow"                 # flow | nn
    pairs: list[str] | None = None     # pair ids; None matches every pair in the dataset


@dataclass
class EvalSection:
    alphas: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.15])
    convention: str = "unit"           # unit | bbox
    unit_mode: str = "diagonal"        # diagonal | per_axis
    predictions: str | None = None


@dataclass
class ProbeSection:
    pair: str | None = None
    point_s: list[float] = field(default_factory=lambda: [0.0, 0.0])
    point_t: list[float] = field(default_factory=lambda: [0.0, 0.0])
    square_side: int = 8
    stride: int = 2


@dataclass
class RunConfig:
    profile: str = "default"
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    msconv: MSConvSection = field(default_factory=MSConvSection)
    mining: MiningSection = field(default_factory=MiningSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    flow: FlowSection = field(default_factory=FlowSection)
    match: MatchSection = field(default_factory=MatchSection)
    eval: EvalSection = field(default_factory=EvalSection)
    probe: ProbeSection = field(default_factory=ProbeSection)

    # ---- conversions to module configs -------------------------------------------------

    def msconv_config(self) -> MSConvConfig | None:
        m = self.msconv
        if not m.enabled:
            return None
        return MSConvConfig(tuple(m.dilations), m.share_kernel, m.fusion == "after_activation")

    def backbone_config(self) -> BackboneConfig:
        b = self.backbone
        kw: dict[str, Any] = {"embed_dim": b.embed_dim}
        if b.channels is not None:
            kw["channels"] = tuple(b.channels)
        make = {"vgg": vgg_config, "alexnet": alexnet_config, "toy": toy_config}[b.arch]
        if b.arch == "toy":
            return make(self.msconv_config(), **kw)
        return make(msconv=self.msconv_config(), **kw)

    def miner_config(self) -> MinerConfig:
        m = self.mining
        return MinerConfig(
            k=m.k,
            pyramid=PyramidConfig(levels=m.levels, min_side=m.min_side, max_side=m.max_side, budget=m.budget),
            match=MatchConfig(candidates=m.candidates, neighbors=m.neighbors, lambda_d=m.lambda_d,
                              lambda_s=m.lambda_s, outlier_cost=m.outlier_cost),
            max_iters=m.max_iters,
        )

    def encoder_train_config(self) -> EncoderTrainConfig:
        e = self.encoder
        return EncoderTrainConfig(epochs=e.epochs, lr=e.lr, momentum=e.momentum, margin=e.margin,
                                  negatives=e.negatives, radius=e.radius,
                                  max_correspondences=e.max_correspondences, augment=e.augment, seed=self.seed)

    def flownet_config(self) -> FlowNetConfig:
        f = self.flow
        return FlowNetConfig(loc_pool=f.loc_pool, squared_feature_loss=f.squared_feature_loss, gamma=f.gamma,
                             mu=f.mu, nu=f.nu, mask_radius=f.mask_radius)

    def flow_train_config(self) -> FlowTrainConfig:
        f = self.flow
        return FlowTrainConfig(epochs=f.epochs, lr=f.lr, optimizer=f.optimizer, joint_encoder=f.joint_encoder,
                               seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


TOY_PROFILE = {
    "data": {"image_size": 64},
    "backbone": {"arch": "toy", "embed_dim": 32},
    "mining": {"min_side": 20.0 * TOY_SCALE, "max_side": 80.0 * TOY_SCALE},
    "encoder": {"radius": 32.0 * TOY_SCALE, "lr": 0.02, "epochs": 20},
}

PROFILES = {"default": {}, "toy": TOY_PROFILE}

# (section, field) -> predicate, description
_CHOICES = {
    ("backbone", "arch"): ("vgg", "alexnet", "toy"),
    ("msconv", "fusion"): ("after_activation", "before_activation"),
    ("flow", "optimizer"): ("adam", "sgd"),
    ("flow", "loc_pool"): ("flatten", "avg"),
    ("match", "mode"): ("flow", "nn"),
    ("eval", "convention"): ("unit", "bbox"),
    ("eval", "unit_mode"): ("diagonal", "per_axis"),
}
_POSITIVE = {
    ("data", "image_size"), ("backbone", "embed_dim"), ("mining", "k"), ("mining", "budget"),
    ("mining", "candidates"), ("mining", "neighbors"), ("mining", "levels"), ("mining", "min_side"),
    ("mining", "max_iters"), ("encoder", "margin"), ("encoder", "negatives"), ("encoder", "radius"),
    ("encoder", "max_correspondences"), ("flow", "mask_radius"), ("probe", "square_side"), ("probe", "stride"),
}
_NON_NEGATIVE = {
    ("mining", "lambda_d"), ("mining", "lambda_s"), ("mining", "outlier_cost"), ("encoder", "epochs"),
    ("encoder", "lr"), ("encoder", "momentum"), ("flow", "epochs"), ("flow", "lr"), ("flow", "gamma"),
    ("flow", "mu"), ("flow", "nu"), ("seed", None),
}


def _coerce(name: str, value, default):
    """Check ``value`` against the type of the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(name, f"expected a list, got {value!r}")
        return list(value)
    return value


def _merge(section, values: dict, prefix: str):
    known = {f.name: f for f in dataclasses.fields(section)}
    for key, value in values.items():
        name = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(name, "unknown key")
        current = getattr(section, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(name, f"expected a mapping, got {value!r}")
            _merge(current, value, name)
        elif current is None:
            setattr(section, key, value)
        else:
            setattr(section, key, _coerce(name, value, current))


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.profile not in PROFILES:
        raise ConfigError("profile", f"unknown profile {cfg.profile!r}; choose from {sorted(PROFILES)}")
    for (sec, key), choices in _CHOICES.items():
        v = getattr(getattr(cfg, sec), key)
        if v not in choices:
            raise ConfigError(f"{sec}.{key}", f"must be one of {list(choices)}, got {v!r}")
    for sec, key in _POSITIVE:
        v = getattr(getattr(cfg, sec), key)
        if not v > 0:
            raise ConfigError(f"{sec}.{key}", f"must be positive, got {v!r}")
    for sec, key in _NON_NEGATIVE:
        v = getattr(cfg, sec) if key is None else getattr(getattr(cfg, sec), key)
        if v < 0:
            raise ConfigError(sec if key is None else f"{sec}.{key}", f"must be non-negative, got {v!r}")
    if cfg.mining.max_side < cfg.mining.min_side:
        raise ConfigError("mining.max_side", "must be at least mining.min_side")
    if not 0 <= cfg.encoder.momentum < 1:
        raise ConfigError("encoder.momentum", f"must lie in [0, 1), got {cfg.encoder.momentum}")
    d = cfg.msconv.dilations
    if not d or any(not isinstance(x, int) or x < 1 for x in d) or list(d) != sorted(set(d)):
        raise ConfigError("msconv.dilations", f"must be strictly increasing positive integers, got {d!r}")
    if not cfg.eval.alphas or any(not 0 < a < 1 for a in cfg.eval.alphas):
        raise ConfigError("eval.alphas", f"must be a non-empty list in (0, 1), got {cfg.eval.alphas!r}")
    if cfg.backbone.channels is not None and len(cfg.backbone.channels) != 4:
        raise ConfigError("backbone.channels", "must list four block widths")
    return cfg


def from_dict(values: dict | None) -> RunConfig:
    values = dict(values or {})
    profile = values.get("profile", "default")
    if profile not in PROFILES:
        raise ConfigError("profile", f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = RunConfig(profile=profile)
    _merge(cfg, PROFILES[profile], "")
    _merge(cfg, values, "")
    return validate(cfg)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return from_dict({})
    try:
        values = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError("config", f"invalid YAML: {e}") from None
    if values is not None and not isinstance(values, dict):
        raise ConfigError("config", "top level must be a mapping")
    return from_dict(values)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
