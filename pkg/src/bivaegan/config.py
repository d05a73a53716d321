"""Hyperparameters for training, prior estimation and evaluation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch

PRIOR_MODES = ("given", "uniform", "cpe", "bbse")
FEATURE_SPACES = ("attribute", "hidden", "visual", "concatenated")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class TrainConfig:
    radius: float = 1.0
    lam: float = 1.0
    alpha: float = 1.0
    beta: float = 10.0
    gamma: float = 10.0
    latent_dim: int | None = None
    hidden: int = 4096
    epochs_inductive: int = 300
    epochs_transductive: int = 300
    batch_size: int = 64
    critic_steps: int = 5
    level2_per_level1: int = 5
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 0.01
    synth_per_class_train: int = 400
    synth_per_class_eval: int = 3000
    prior_mode: str = "cpe"
    given_prior: list[float] | None = None
    eval_prior: str = "uniform"
    feature_space: str = "concatenated"
    hidden_post_activation: bool = True
    classifier_epochs: int = 25
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-4
    reset_optimizer: bool = False
    gzsl_mix_real_seen: bool = False
    adv_ceiling: float = 1e4
    checkpoint_every: int = 0
    seed: int = 0
    precision: str = "f64"
    transductive: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        for key in ("radius", "lam", "alpha", "beta", "gamma", "weight_decay"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0", key)
        if self.radius <= 0:
            raise ConfigError("radius must be > 0", "radius")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0", "lr")
        for key in ("hidden", "batch_size", "critic_steps", "level2_per_level1",
                    "synth_per_class_train", "synth_per_class_eval", "classifier_epochs", "kmeans_max_iters"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key)
        for key in ("epochs_inductive", "epochs_transductive", "checkpoint_every"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0", key)
        if self.latent_dim is not None and self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1", "latent_dim")
        if self.prior_mode not in PRIOR_MODES:
            raise ConfigError(f"prior_mode must be one of {PRIOR_MODES}", "prior_mode")
        if self.eval_prior not in ("estimated", "uniform"):
            raise ConfigError("eval_prior must be 'estimated' or 'uniform'", "eval_prior")
        if self.feature_space not in FEATURE_SPACES:
            raise ConfigError(f"feature_space must be one of {FEATURE_SPACES}", "feature_space")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be 'f32' or 'f64'", "precision")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "f64" else torch.float32

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}", key)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def full_scale_config(**overrides) -> TrainConfig:
    """Full-scale settings reported for the AWA-style benchmarks."""
    base = dict(radius=1.0, lam=1.0, alpha=1.0, beta=10.0, gamma=10.0, hidden=4096,
                epochs_inductive=300, epochs_transductive=300, synth_per_class_eval=3000)
    base.update(overrides)
    return TrainConfig(**base)


def fixture_config(**overrides) -> TrainConfig:
    """Desk-scale settings for the default synthetic fixture (about one minute per run on one CPU)."""
    base = dict(hidden=128, batch_size=32, epochs_inductive=40, epochs_transductive=60,
                synth_per_class_train=100, synth_per_class_eval=200)
    base.update(overrides)
    return TrainConfig(**base)
