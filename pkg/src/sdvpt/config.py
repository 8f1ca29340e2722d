"""Run configuration, loadable from a single JSON document."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .data import DataConfig
from .encoder import MiniViTConfig
from .head import HeadConfig
from .losses import LossWeights


@dataclass(frozen=True)
class TrainConfig:
    e1: int = 20
    e2: int = 40
    k: int = 4
    loss_weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-3
    prompt_lr: float | None = None  # None: same as learning_rate
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    seed: int = 0
    prompt_tokens: int = 4
    normalize_fusion_weights: bool = False
    nonnegative_weights: bool = False
    recon_metric: str = "l2"
    contrastive_negatives: str = "batch"
    stage0_steps: int = 2000
    stage0_lr: float = 1e-3
    eval_k: int | None = None
    checked: bool = False
    model: MiniViTConfig = field(default_factory=MiniViTConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if not 0 <= self.e1 < self.e2:
            raise ValueError(f"need 0 <= e1 < e2, got e1={self.e1}, e2={self.e2}")
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.learning_rate <= 0 or self.stage0_lr <= 0 or (self.prompt_lr is not None and self.prompt_lr <= 0):
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.recon_metric not in ("l2", "cosine"):
            raise ValueError(f"unknown recon metric {self.recon_metric!r}")
        if self.contrastive_negatives not in ("batch", "all_seen"):
            raise ValueError(f"unknown contrastive_negatives {self.contrastive_negatives!r}")
        if self.prompt_tokens < 1:
            raise ValueError("prompt_tokens must be >= 1")

    @property
    def inference_k(self) -> int:
        return self.k if self.eval_k is None else self.eval_k

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if "model" in d:
            d["model"] = MiniViTConfig.from_dict(d["model"])
        if "head" in d:
            d["head"] = HeadConfig(**d["head"])
        return cls(**d)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"data": self.data.to_dict(), "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"data", "train"}
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        try:
            return cls(
                DataConfig.from_dict(d.get("data", {})),
                TrainConfig.from_dict(d.get("train", {})),
            )
        except TypeError as err:  # unexpected keyword in a section
            raise ValueError(f"invalid config: {err}") from None

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(replace(self.data, seed=seed), replace(self.train, seed=seed))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_dict(json.loads(Path(path).read_text()))
