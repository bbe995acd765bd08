"""Experiment configuration: JSON-serializable dataclasses plus named profiles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .agent import AgentConfig, RewardConfig
from .channel import CHANNEL_KINDS
from .diffusion import SIGMA_MIN
from .swin import CodecConfig, SwinStageConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    name: str = "synthetic"  # mnist | cifar10 | svhn | intel | synthetic
    root: str = "data"
    train_limit: int | None = None
    val_size: int = 1000
    augment: bool = True
    flips: bool = False  # disabled for chirality-sensitive digit datasets
    synthetic_train: int = 6000
    synthetic_test: int = 1200

    def __post_init__(self):
        known = ("mnist", "cifar10", "svhn", "intel", "synthetic")
        if self.name not in known:
            raise ConfigError(f"unknown dataset {self.name!r}, expected one of {known}")
        if self.val_size < 0:
            raise ConfigError("val_size must be >= 0")


@dataclass
class ChannelTrainConfig:
    kind: str = "awgn"
    snr_min_db: float = 0.0
    snr_max_db: float = 30.0
    rician_k: float = 2.0
    impulse_prob: float = 0.01
    impulse_var_mult: float = 100.0
    phase_sigma: float = 0.1

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ConfigError(f"unknown channel kind {self.kind!r}")
        if self.snr_min_db > self.snr_max_db:
            raise ConfigError("snr_min_db must be <= snr_max_db")


@dataclass
class DenoiserTrainConfig:
    enabled: bool = True
    width: int = 32
    n_blocks: int = 2
    time_dim: int = 64
    gn_groups: int = 8
    steps: int = 18
    mode: str = "heun"
    sigma_min: float = SIGMA_MIN
    pretrain_epochs: int = 0  # optional stagewise DSM warm-up before joint training

    def __post_init__(self):
        if self.mode not in ("heun", "alg1", "alg1_literal"):
            raise ConfigError(f"unknown sampler mode {self.mode!r}")
        if self.steps < 1:
            raise ConfigError("denoiser steps must be >= 1")


@dataclass
class OptimConfig:
    lr: float = 1e-4
    lr_min: float = 1e-6
    epochs: int = 50
    batch_size: int = 128
    grad_clip: float = 1.0
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr_min > self.lr:
            raise ConfigError("lr_min must be <= lr")


@dataclass
class EvalConfig:
    snrs_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    channels: tuple[str, ...] = ("awgn",)
    max_samples: int = 1024
    seed: int = 1234


@dataclass
class AdaptConfig:
    ranks: dict = field(default_factory=lambda: {"encoder": 16, "decoder": 16, "denoiser": 8, "classifier": 4})
    fraction: float = 0.01
    max_epochs: int = 5
    patience: int = 1
    batch_size: int = 16
    lr: float = 2e-3
    val_samples: int = 256

    def __post_init__(self):
        if not (0.0 < self.fraction <= 1.0):
            raise ConfigError("adaptation fraction must be in (0, 1]")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    label: str = "full"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    classifier_hidden: tuple[int, ...] = (256,)
    num_classes: int = 10
    denoiser: DenoiserTrainConfig = field(default_factory=DenoiserTrainConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    channel: ChannelTrainConfig = field(default_factory=ChannelTrainConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    sigma_source_train: str = "oracle"  # oracle | snr
    sigma_source_eval: str = "snr"

    def __post_init__(self):
        for name in ("sigma_source_train", "sigma_source_eval"):
            if getattr(self, name) not in ("oracle", "snr"):
                raise ConfigError(f"{name} must be 'oracle' or 'snr'")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        try:
            if "dataset" in data:
                data["dataset"] = DatasetConfig(**data["dataset"])
            if "codec" in data:
                codec = dict(data["codec"])
                codec.pop("final_grid", None)
                codec["image_shape"] = tuple(codec["image_shape"])
                codec["latent_shape"] = tuple(codec["latent_shape"])
                codec["stages"] = tuple(SwinStageConfig(**s) for s in codec["stages"])
                data["codec"] = CodecConfig(**codec)
            if "denoiser" in data:
                data["denoiser"] = DenoiserTrainConfig(**data["denoiser"])
            if "agent" in data:
                agent = dict(data["agent"])
                if "reward" in agent:
                    agent["reward"] = RewardConfig(**agent["reward"])
                if "hidden" in agent:
                    agent["hidden"] = tuple(agent["hidden"])
                data["agent"] = AgentConfig(**agent)
            if "channel" in data:
                data["channel"] = ChannelTrainConfig(**data["channel"])
            if "optim" in data:
                data["optim"] = OptimConfig(**data["optim"])
            if "eval" in data:
                ev = dict(data["eval"])
                ev["snrs_db"] = tuple(ev.get("snrs_db", ()))
                ev["channels"] = tuple(ev.get("channels", ()))
                data["eval"] = EvalConfig(**ev)
            if "adapt" in data:
                data["adapt"] = AdaptConfig(**data["adapt"])
            if "classifier_hidden" in data:
                data["classifier_hidden"] = tuple(data["classifier_hidden"])
        except TypeError as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def desk_profile(**overrides) -> ExperimentConfig:
    """Small configuration that trains in minutes on CPU."""
    cfg = ExperimentConfig(
        label="desk",
        dataset=DatasetConfig(name="synthetic", train_limit=5000, val_size=500, augment=True, flips=False),
        codec=CodecConfig(
            image_shape=(28, 28, 1),
            patch_size=2,
            stages=(SwinStageConfig(2, 48, 3, 4), SwinStageConfig(2, 96, 6, 4)),
            latent_shape=(7, 7, 12),
            mlp_ratio=2.0,
        ),
        classifier_hidden=(256,),
        num_classes=10,
        denoiser=DenoiserTrainConfig(width=32, n_blocks=2, time_dim=64, gn_groups=8, steps=8),
        optim=OptimConfig(lr=2e-3, lr_min=2e-5, epochs=3, batch_size=64),
        eval=EvalConfig(max_samples=512),
    )
    return _override(cfg, overrides)


def full_profile(**overrides) -> ExperimentConfig:
    """Mirrors the reference training setup (50 epochs, batch 128, 32x32 color)."""
    cfg = ExperimentConfig(
        label="full",
        dataset=DatasetConfig(name="cifar10", augment=True, flips=True, val_size=5000),
        codec=CodecConfig(),
        optim=OptimConfig(lr=1e-4, lr_min=1e-6, epochs=50, batch_size=128),
        eval=EvalConfig(channels=("awgn",), max_samples=10_000),
    )
    return _override(cfg, overrides)


def _override(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    return cfg


PROFILES = {"desk": desk_profile, "full": full_profile}
