"""
Experiment configuration: YAML file -> frozen dataclasses.

    cfg = load_config("desk_config.yaml", ["train.iterations=50"])

Dotted overrides are parsed as YAML scalars. EGOPOSE_SEED, when set, replaces
both data.seed and train.seed.
"""
import functools
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from errors import ConfigError
from losses import LossWeights
from motion import PROTOCOLS
from sensor_sim import DomainProfile, SensorRig, SimulationSettings
from synthesis import LOWER_MODES, synth_noisy_oracle

SEED_ENV = "EGOPOSE_SEED"

ABLATION_MODES = (
    "synthesis_only",
    "mpe",
    "mpe_spc_decoder",
    "mpe_spc_decoder_pcloss",
    "mpe_spc_decoder_spcloss",
)


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    train_sequences: int = 160
    eval_sequences: int = 40
    real_sequences: int = 60
    real_eval_sequences: int = 20
    protocols: tuple = ("walk", "kick", "knee_strike", "lift_leg", "idle")
    eval_protocols: tuple = ("kick", "kick", "knee_strike", "walk", "lift_leg")
    data_dir: str = "data"
    workers: int = 1

    def __post_init__(self):
        for name in ("train_sequences", "eval_sequences", "real_sequences", "real_eval_sequences"):
            if getattr(self, name) < 0:
                raise ConfigError(f"data.{name} must be non-negative")
        for protocol in (*self.protocols, *self.eval_protocols):
            if protocol not in PROTOCOLS:
                raise ConfigError(f"unknown protocol {protocol!r} in data config")


@dataclass(frozen=True)
class SynthesisConfig:
    upper_sigma_deg: float = 3.0
    lower_mode: str = "idle"
    lag_seconds: float = 0.5
    smooth_frames: float = 3.0

    def __post_init__(self):
        if self.lower_mode not in LOWER_MODES:
            raise ConfigError(f"synthesis.lower_mode must be one of {LOWER_MODES}")
        if self.upper_sigma_deg < 0:
            raise ConfigError("synthesis.upper_sigma_deg must be non-negative")

    def synthesizer(self, skeleton, fps):
        return functools.partial(
            synth_noisy_oracle,
            skeleton=skeleton,
            upper_sigma=float(np.deg2rad(self.upper_sigma_deg)),
            lower_mode=self.lower_mode,
            lag_seconds=self.lag_seconds,
            fps=fps,
            smooth_frames=self.smooth_frames,
        )


@dataclass(frozen=True)
class SpcConfig:
    encoder_widths: tuple = (64, 128)
    decoder_hidden: int = 128


@dataclass(frozen=True)
class MpeConfig:
    hidden: tuple = (256, 256)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    lr: float = 3e-4
    batch_mocap: int = 16
    batch_real: int = 8
    window: int = 8
    weights: LossWeights = LossWeights()
    ablation_mode: str = "mpe_spc_decoder_spcloss"
    seed: int = 0
    theta: float = 0.10
    support_fraction: float = 0.05
    detach_evidence: bool = True
    history_refresh: int = 50
    fine_tune_iterations: int = 500

    def __post_init__(self):
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"train.ablation_mode must be one of {ABLATION_MODES}")
        for name in ("batch_mocap", "batch_real", "window", "history_refresh"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.iterations < 0 or self.fine_tune_iterations < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.lr <= 0 or self.theta <= 0:
            raise ConfigError("train.lr and train.theta must be positive")


@dataclass(frozen=True)
class RunConfig:
    output_dir: str = "runs"
    ledger: str = "egopose.db"
    skeleton: str = "skeleton.yaml"


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    sensor: SensorRig = field(default_factory=SensorRig)
    domain: DomainProfile = field(default_factory=DomainProfile)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    spc: SpcConfig = field(default_factory=SpcConfig)
    mpe: MpeConfig = field(default_factory=MpeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)
    source: str = None


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _build(cls, values, section):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")
    try:
        return cls(**{k: _tupled(v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from None


def _sensor(values):
    values = dict(values or {})
    for key in ("view_pitch", "fov_half_angle"):
        deg = values.pop(f"{key}_deg", None)
        if deg is not None:
            values[key] = float(np.deg2rad(deg))
    return _build(SensorRig, values, "sensor")


def _train(values):
    values = dict(values or {})
    weights = values.pop("weights", None)
    if weights is not None:
        values["weights"] = _build(LossWeights, weights, "train.weights")
    return _build(TrainConfig, values, "train")


_SECTIONS = {
    "data": lambda v: _build(DataConfig, v, "data"),
    "simulation": lambda v: _build(SimulationSettings, v, "simulation"),
    "sensor": _sensor,
    "domain": lambda v: _build(DomainProfile, v, "domain"),
    "synthesis": lambda v: _build(SynthesisConfig, v, "synthesis"),
    "spc": lambda v: _build(SpcConfig, v, "spc"),
    "mpe": lambda v: _build(MpeConfig, v, "mpe"),
    "train": _train,
    "run": lambda v: _build(RunConfig, v, "run"),
}


def apply_override(raw, assignment):
    key, sep, text = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError:
        value = text
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {assignment!r} descends into a non-mapping")
    node[parts[-1]] = value


def load_config(path=None, overrides=(), environ=None):
    environ = os.environ if environ is None else environ
    raw = {}
    if path is not None:
        path = Path(path)
        try:
            with open(path, "r") as f:
                raw = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")

    for assignment in overrides or ():
        apply_override(raw, assignment)

    seed = environ.get(SEED_ENV)
    if seed not in (None, ""):
        try:
            seed = int(seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from None
        raw.setdefault("data", {})["seed"] = seed
        raw.setdefault("train", {})["seed"] = seed

    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    built = {name: make(raw.get(name)) for name, make in _SECTIONS.items()}
    return ExperimentConfig(**built, source=str(path) if path else None)
