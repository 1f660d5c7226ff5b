"""Configuration records shared by the models, the trainer and the CLI."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .scenarios.cf import CfConfig
from .scenarios.common import dbm_to_watt
from .scenarios.ma import MaConfig


@dataclass(frozen=True)
class ModelConfig:
    d_h: int = 128
    encoder_layers: int = 2
    context_layers: int = 2
    beamformer_layers: int = 2
    beamformer_width: int = 128
    critic_layers: int = 6
    clip: float = 8.0
    heads: int = 8
    mlp_hidden: int = 2
    batch_norm: bool = True

    @classmethod
    def full_cf(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def full_ma(cls) -> "ModelConfig":
        return cls(encoder_layers=3, beamformer_layers=3, beamformer_width=64, batch_norm=False)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    steps_per_epoch: int = 50
    batch_size: int = 1024
    lr: float = 1e-4
    seed: int = 0
    pretrain_epochs: int = 0
    grad_clip: float = 10.0
    val_batch: int = 256

    def __post_init__(self):
        if min(self.epochs, self.steps_per_epoch, self.batch_size) < 1:
            raise ValueError("epochs, steps and batch size must be positive")
        if self.lr < 0 or self.pretrain_epochs < 0:
            raise ValueError("learning rate and pretraining epochs must be non-negative")


@dataclass(frozen=True)
class DataConfig:
    train: int = 51200
    val: int = 1024
    test: int = 1024

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 1:
            raise ValueError("dataset sizes must be >= 1")


def _build(cls, raw: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**raw)


def scenario_from_dict(name: str, raw: dict) -> CfConfig | MaConfig:
    raw = dict(raw)
    for key in ("p_max", "noise"):
        if f"{key}_dbm" in raw:
            raw[key] = dbm_to_watt(float(raw.pop(f"{key}_dbm")))
    if name == "cf":
        return _build(CfConfig, raw)
    if name == "ma":
        return _build(MaConfig, raw)
    raise ValueError(f"unknown scenario {name!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    system: CfConfig | MaConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        raw = dict(raw)
        scenario = raw.pop("scenario")
        system = scenario_from_dict(scenario, raw.pop("system", {}))
        model = _build(ModelConfig, raw.pop("model", {}))
        train = _build(TrainConfig, raw.pop("train", {}))
        data = _build(DataConfig, raw.pop("data", {}))
        seed = int(raw.pop("seed", train.seed))
        if raw:
            raise ValueError(f"unknown config keys: {sorted(raw)}")
        return cls(scenario, system, model, train, data, seed)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "system": self.system.to_dict(),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "data": asdict(self.data),
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def system_hash(self) -> str:
        """Digest of the scenario and model settings (what a checkpoint must match)."""
        payload = json.dumps(
            {"scenario": self.scenario, "system": self.system.to_dict(), "model": asdict(self.model)},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        from dataclasses import replace

        return replace(self, seed=seed, train=replace(self.train, seed=seed))
