"""Run configuration: one JSON document that reproduces a run.

Every section has materialized defaults, unknown keys are rejected at every
level, and ``to_dict`` always emits the complete document so that stored
copies are self-describing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .bottleneck import TrainConfig
from .formats import read_json
from .grounding import MagnitudeSpectrum
from .inversion import LossWeights
from .renderer import RENDERER_ID, LatentSpec

ENCODER_MODES = ("oracle", "regression", "optimize")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train: int = 2000
    test: int = 500
    k_min: int = 2

    def __post_init__(self):
        if self.train < 1 or self.test < 0:
            raise ConfigError("need train >= 1 and test >= 0")
        if self.k_min < 1:
            raise ConfigError("k_min must be >= 1")


@dataclass(frozen=True)
class EncoderConfig:
    mode: str = "oracle"
    ridge: float = 1e-3
    steps: int = 300
    lr: float = 0.5
    momentum: float = 0.9

    def __post_init__(self):
        if self.mode not in ENCODER_MODES:
            raise ConfigError(f"encoder mode must be one of {ENCODER_MODES}")
        if not self.ridge > 0:
            raise ConfigError("ridge must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 2000

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, momentum=self.momentum, epochs=self.epochs, seed=seed)


@dataclass(frozen=True)
class EvalConfig:
    sample_cap: int = 50

    def __post_init__(self):
        if self.sample_cap < 0:
            raise ConfigError("sample_cap must be >= 0")


@dataclass(frozen=True)
class PathsConfig:
    data: str | None = None
    model: str | None = None
    encoder: str | None = None
    out: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    renderer: str = RENDERER_ID
    spec: LatentSpec = field(default_factory=LatentSpec)
    data: DataConfig = field(default_factory=DataConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    spectrum: MagnitudeSpectrum = field(default_factory=MagnitudeSpectrum)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.renderer != RENDERER_ID:
            raise ConfigError(f"unknown renderer {self.renderer!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.spectrum.theta > len(self.spectrum.magnitudes):
            raise ConfigError("theta exceeds the number of magnitudes; the vote can never fire")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "__dataclass_fields__"):
                v = {g.name: _plain(getattr(v, g.name)) for g in fields(v)}
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = {}
        for name, value in d.items():
            default = getattr(cls(), name)
            if hasattr(default, "__dataclass_fields__"):
                kwargs[name] = _section(type(default), value, name)
            else:
                kwargs[name] = value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _section(kind, value, name):
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    allowed = {f.name for f in fields(kind)}
    unknown = sorted(set(value) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    if kind is MagnitudeSpectrum and "magnitudes" in value:
        value = {**value, "magnitudes": tuple(value["magnitudes"])}
    try:
        return kind(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(read_json(path))
