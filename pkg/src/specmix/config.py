"""Training configuration, stored as flat JSON in each run directory."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from specmix.errors import ConfigError


@dataclass
class TrainConfig:
    lambda0: float = 0.0  # mean absolute error weight
    lambda1: float = 0.4  # abundance sparsity
    lambda2: float = 1e-5  # l2 on encoder weights
    lambda_pq: float = 10.0  # gradient-penalty weight
    lr: float = 0.002
    beta1: float = 0.7
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    iterations: int = 10000
    K: int = 4
    N: int = 8
    M: int = 10
    L: int | None = None  # noise dimension; None means K
    seed: int = 0
    use_encoder: bool = True
    use_corrections: bool = True
    use_adversarial: bool = True
    post_normalization: bool = False
    group_lr_scaling: bool = True  # scale each group's step size by its loss coefficients
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.validate()

    @property
    def noise_dim(self) -> int:
        return self.K if self.L is None else self.L

    def validate(self):
        for name in ("lambda0", "lambda1", "lambda2", "lambda_pq"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.N < self.K:
            raise ConfigError(f"N ({self.N}) must be >= K ({self.K})")
        if self.M < 1 or (self.L is not None and self.L < 0):
            raise ConfigError("M must be >= 1 and L >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def updated(self, **overrides) -> "TrainConfig":
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_dict(data)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a flat JSON object")
        return cls.from_dict(data)


def synthetic_preset(**overrides) -> TrainConfig:
    """Settings for the synthetic scene: mean absolute error switched on."""
    base = dict(lambda0=1.0, K=4, N=16, M=10)
    base.update(overrides)
    return TrainConfig(**base)
