"""Experiment configuration: defaults, file loading, flag overrides, validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

SCHEMES = ("feddpms", "fedavg", "fedprox")
# what advances the step-decay schedule: local epochs inside one client update
# (optimizer rebuilt every round) or global rounds
LR_CLOCKS = ("local_epoch", "round")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scheme: str = "feddpms"

    # data source: "synthetic" Gaussian clusters or an IDX image/label pair
    dataset: str = "synthetic"
    synthetic_classes: int = 10
    synthetic_per_class: int = 1000
    synthetic_dim: int = 6
    synthetic_spread: float = 0.1
    synthetic_modes: int = 1
    synthetic_mode_radius: float = 0.0
    test_per_class: int = 200
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    idx_fraction: float = 1.0

    clients: int = 10
    clients_per_round: int = 10
    beta: float = 0.5

    rounds: int = 50
    pretrain_rounds: int = 20
    local_epochs: int = 5
    batch_size: int = 64
    lr: float = 0.001
    lr_period: int = 10
    lr_gamma: float = 0.5
    lr_clock: str = "local_epoch"

    latent_dim: int = 32
    enc_hidden: list[int] = field(default_factory=lambda: [256])
    clf_hidden: list[int] = field(default_factory=lambda: [128])
    lam: float = 0.05
    n: int = 3
    negotiate_n: bool = False
    alpha: int = 33
    noise_std: float = 0.1
    max_attempts: int = 50

    mu_prox: float = 0.001

    seed: int = 0
    trials: int = 1
    max_local_steps: int | None = None
    eval_every: int = 1
    output_dir: str = "runs"

    def validate(self) -> "ExperimentConfig":
        def bad(msg):
            raise ConfigError(msg)

        if self.scheme not in SCHEMES:
            bad(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.lr_clock not in LR_CLOCKS:
            bad(f"lr_clock must be one of {LR_CLOCKS}, got {self.lr_clock!r}")
        if self.dataset not in ("synthetic", "idx"):
            bad(f"dataset must be 'synthetic' or 'idx', got {self.dataset!r}")
        if self.dataset == "idx" and not (self.train_images and self.train_labels
                                          and self.test_images and self.test_labels):
            bad("dataset 'idx' needs train_images, train_labels, test_images, test_labels")
        if not self.beta > 0:
            bad(f"beta must be > 0, got {self.beta}")
        if self.clients < 1:
            bad("clients must be >= 1")
        if not 1 <= self.clients_per_round <= self.clients:
            bad(f"clients_per_round must lie in [1, clients={self.clients}]")
        if self.rounds < 1:
            bad("rounds must be >= 1")
        if self.scheme == "feddpms" and not 1 <= self.pretrain_rounds < self.rounds:
            bad(f"feddpms needs 1 <= pretrain_rounds < rounds, got {self.pretrain_rounds} and {self.rounds}")
        for name in ("local_epochs", "batch_size", "lr_period", "latent_dim", "alpha", "max_attempts",
                     "trials", "eval_every", "synthetic_classes", "synthetic_per_class", "synthetic_dim", "synthetic_modes"):
            if getattr(self, name) < 1:
                bad(f"{name} must be >= 1")
        if not 1 <= self.n <= self.synthetic_classes and self.dataset == "synthetic":
            bad("n must lie in [1, number of classes]")
        for name in ("lr", "lr_gamma"):
            if not getattr(self, name) > 0:
                bad(f"{name} must be > 0")
        for name in ("lam", "noise_std", "mu_prox", "synthetic_spread", "synthetic_mode_radius"):
            if getattr(self, name) < 0:
                bad(f"{name} must be >= 0")
        if not 0 < self.idx_fraction <= 1:
            bad("idx_fraction must lie in (0, 1]")
        if self.max_local_steps is not None and self.max_local_steps < 1:
            bad("max_local_steps must be >= 1 when set")
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


FIELD_NAMES = tuple(f.name for f in fields(ExperimentConfig))


def from_mapping(values: dict | None) -> ExperimentConfig:
    values = dict(values or {})
    unknown = sorted(set(values) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return ExperimentConfig(**values).validate()


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Load a YAML/JSON file (may be empty), then apply ``overrides``.

    Overrides whose value is None are ignored.
    """
    values = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) if text.strip() else None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        values.update(loaded)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return from_mapping(values)
