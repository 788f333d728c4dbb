"""Hyperparameters shared by the model, training and evaluation code."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

from .features import ConfigError

ORTH_NORMS = ("batch", "none")
EXTRACTORS = ("mmoe", "shared")
# how many source rows accompany each target batch in two-domain training
SOURCE_BATCHES = ("equal", "proportional")


@dataclass(frozen=True)
class TrainConfig:
    d: int = 64
    K: int = 2
    L: int = 2
    tower_layers_s: int = 2
    tower_layers_t: int = 2
    tower_width: int = 64
    alpha: float = 0.01
    beta: float = 0.1
    orth_norm: str = "batch"
    extractor: str = "mmoe"
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    source_batch: str = "equal"
    eval_batch_size: int = 8192
    epochs: int = 200
    early_stopping: bool = True
    patience: int = 10
    seed: int = 0
    freeze_transferred: bool = False
    target_domain: str = "target"

    def __post_init__(self):
        for k in ("d", "K", "L", "epochs", "batch_size", "tower_layers_s", "tower_layers_t",
                  "tower_width", "eval_batch_size", "patience"):
            if getattr(self, k) < 1:
                raise ConfigError(f"TrainConfig.{k} must be >= 1, got {getattr(self, k)}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.orth_norm not in ORTH_NORMS:
            raise ConfigError(f"orth_norm must be one of {ORTH_NORMS}")
        if self.extractor not in EXTRACTORS:
            raise ConfigError(f"extractor must be one of {EXTRACTORS}")
        if self.source_batch not in SOURCE_BATCHES:
            raise ConfigError(f"source_batch must be one of {SOURCE_BATCHES}")
        if self.target_domain not in ("source", "target"):
            raise ConfigError("target_domain must be 'source' or 'target'")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# published settings for the two public benchmarks
AMAZON = TrainConfig(alpha=0.01, beta=0.1, K=2, L=2, tower_layers_s=2, tower_layers_t=2)
TAOBAO = TrainConfig(alpha=0.03, beta=0.1, K=2, L=2, tower_layers_s=3, tower_layers_t=3)
