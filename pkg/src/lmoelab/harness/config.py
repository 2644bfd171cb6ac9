"""Experiment configuration: a versioned key-value tree with strict keys."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..lmoe import FEATURE_ROUTED, LANGUAGE_GUIDED
from ..objectives import STUDENT_REFERENCE, TEACHER_REFERENCE
from ..scenegen import SceneConfig, two_group_config

CFG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    moe: bool = True
    lmoe_layers: tuple[bool, ...] | None = None  # per-layer toggle; None means every layer
    router_mode: str = LANGUAGE_GUIDED
    n_experts: int = 4
    top_k: int = 2
    h_routed: int = 512
    h_shared: int = 1024
    ffn_hidden: int = 2048
    renormalize: bool = False
    router_init: float = 1e-2

    def uses_lmoe(self, layer: int) -> bool:
        if not self.moe:
            return False
        return True if self.lmoe_layers is None else bool(self.lmoe_layers[layer])


@dataclass(frozen=True)
class LossConfig:
    w_contrast: float = 1.0
    w_kd: float = 0.5
    w_balance: float = 0.01
    w_task_cls: float = 1.0
    w_center: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    logit_scale: float = 10.0
    kd_temperature: float = 1.0
    kd_direction: str = TEACHER_REFERENCE
    lambda_cls: float = 2.0
    lambda_center: float = 0.25


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_scenes: int = 400
    eval_scenes: int = 400
    log_every: int = 1
    model_seed: int = 0
    data_seed: int = 0
    eval_seed_offset: int = 1_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cfg_version: int = CFG_VERSION

    def __post_init__(self):
        m, l = self.model, self.losses
        if m.router_mode not in (LANGUAGE_GUIDED, FEATURE_ROUTED):
            raise ConfigError(f"model.router_mode must be {LANGUAGE_GUIDED!r} or {FEATURE_ROUTED!r}")
        if not 1 <= m.top_k <= m.n_experts:
            raise ConfigError("model.top_k must lie in [1, n_experts]")
        if m.lmoe_layers is not None and len(m.lmoe_layers) != m.n_layers:
            raise ConfigError("model.lmoe_layers needs one entry per layer")
        for name in ("w_contrast", "w_kd", "w_balance", "w_task_cls", "w_center", "lambda_cls", "lambda_center"):
            if getattr(l, name) < 0:
                raise ConfigError(f"losses.{name} must be >= 0")
        if l.logit_scale <= 0:
            raise ConfigError("losses.logit_scale must be > 0")
        if l.kd_temperature <= 0:
            raise ConfigError("losses.kd_temperature must be > 0")
        if l.kd_direction not in (TEACHER_REFERENCE, STUDENT_REFERENCE):
            raise ConfigError(f"unknown losses.kd_direction {l.kd_direction!r}")
        if self.train.steps < 0 or self.train.batch_size < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
        if self.cfg_version != CFG_VERSION:
            raise ConfigError(f"unsupported cfg_version {self.cfg_version}")

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with per-section overrides, e.g. ``replace(model={"top_k": 1})``."""
        kw = {}
        for name, over in sections.items():
            kw[name] = dataclasses.replace(getattr(self, name), **over)
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "cfg_version": self.cfg_version,
            "scene": self.scene.to_dict(),
            "model": _plain(dataclasses.asdict(self.model)),
            "losses": dataclasses.asdict(self.losses),
            "train": dataclasses.asdict(self.train),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
        d = dict(d)
        version = d.pop("cfg_version", None)
        if version != CFG_VERSION:
            raise ConfigError(f"cfg_version must be {CFG_VERSION}, got {version!r}")
        unknown = set(d) - {"scene", "model", "losses", "train"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        try:
            scene_d = dict(d.get("scene") or {})
            preset = scene_d.pop("preset", None)
            if preset == "two_group":
                scene = _two_group(scene_d)
            elif preset in (None, "default"):
                scene = SceneConfig.from_dict(scene_d)
            else:
                raise ConfigError(f"unknown scene preset {preset!r}")
            model_d = dict(d.get("model") or {})
            if model_d.get("lmoe_layers") is not None:
                model_d["lmoe_layers"] = tuple(bool(x) for x in model_d["lmoe_layers"])
            return cls(
                scene=scene,
                model=_section(ModelConfig, model_d, "model"),
                losses=_section(LossConfig, d.get("losses") or {}, "losses"),
                train=_section(TrainConfig, d.get("train") or {}, "train"),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _two_group(overrides: dict) -> SceneConfig:
    base = two_group_config().to_dict()
    unknown = set(overrides) - set(base)
    if unknown:
        raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
    base.update(overrides)
    return SceneConfig.from_dict(base)


def _section(cls, values: dict, name: str):
    unknown = set(values) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    return cls(**values)


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def desk_config(two_group: bool = False, **sections) -> ExperimentConfig:
    """The scaled-down setting used by the shipped configs and acceptance runs.

    Expert widths keep the 1 : 2 : 4 ratio of routed, shared and plain FFN
    hidden sizes, so top-2 routing matches the FFN's compute.
    """
    cfg = ExperimentConfig(
        scene=two_group_config() if two_group else SceneConfig(),
        model=ModelConfig(h_routed=32, h_shared=64, ffn_hidden=128),
    )
    return cfg.replace(**sections) if sections else cfg
