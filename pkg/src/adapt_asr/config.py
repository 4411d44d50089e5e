"""Run configuration: one file per run, every field defaulted except the seed."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .adapters import AdapterSpec
from .corpus import ALL, DEFAULT_CONDITIONS, DataRegime
from .features import SpecAugPolicy
from .model import ModelConfig
from .training import TrainPlan

Count = Union[int, str]


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    pretrain_manifest: Optional[str] = None
    adapt_manifest: Optional[str] = None
    conditions: list[str] = field(default_factory=lambda: list(DEFAULT_CONDITIONS))
    snr_range: list[float] = field(default_factory=lambda: [0.0, 20.0])
    mixes_per_clean: int = 1
    noise_offset_policy: str = "random"
    condition: str = "simu"
    split: str = "train"


@dataclass
class FeaturesSection:
    num_freq_masks: int = 2
    max_freq_width: int = 10
    num_time_masks: int = 2
    max_time_width: int = 10


@dataclass
class ModelSection:
    num_encoder_layers: int = 6
    num_decoder_layers: int = 6
    attn_dim: int = 128
    attn_heads: int = 4
    ff_units: int = 512
    decoder_ff_units: Optional[int] = None
    subsample_rate: int = 4
    pos_encoding: str = "relative"
    conv_kernel: int = 15
    dropout: float = 0.1
    utterance_mvn: bool = True


@dataclass
class AdapterSection:
    positions: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    emb_dim: int = 16
    activation: str = "relu"
    init: str = "lora_zero_up"
    init_std: float = 0.02


@dataclass
class FrontendSection:
    kind: Optional[str] = None
    config: dict = field(default_factory=dict)
    pretrain_epochs: int = 5
    with_adapter: bool = True


@dataclass
class TrainSection:
    epochs: int = 20
    lr: float = 1e-3
    warmup_steps: int = 200
    adapt_epochs: int = 20
    adapt_lr: float = 1e-3
    adapt_warmup_steps: int = 50
    batch_size: int = 16
    grad_clip: float = 5.0
    label_smoothing: float = 0.1
    top_k: int = 10
    max_steps: Optional[int] = None
    se_weight: float = 1.0
    se_loss: str = "l1"
    real_count: Count = ALL
    simu_count: Count = ALL
    held_out_condition: Optional[str] = None
    multi_condition_quota: Optional[int] = None


@dataclass
class EvalSection:
    splits: list[str] = field(default_factory=lambda: ["dev", "eval"])
    batch_size: int = 16
    axis: str = "position"
    real_per_condition: int = 400


SECTIONS = {
    "corpus": CorpusSection,
    "features": FeaturesSection,
    "model": ModelSection,
    "adapter": AdapterSection,
    "frontend": FrontendSection,
    "train": TrainSection,
    "eval": EvalSection,
}


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return cls(**data)


@dataclass
class RunConfig:
    seed: int
    corpus: CorpusSection = field(default_factory=CorpusSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    model: ModelSection = field(default_factory=ModelSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    frontend: FrontendSection = field(default_factory=FrontendSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, data: dict, seed: Optional[int] = None) -> "RunConfig":
        data = dict(data or {})
        unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        if seed is None:
            seed = data.get("seed")
        if seed is None:
            raise ConfigError("seed is mandatory (set 'seed' in the config or pass --seed)")
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        sections = {name: _build(klass, data.get(name), name) for name, klass in SECTIONS.items()}
        return cls(seed=seed, **sections)

    @classmethod
    def load(cls, path, seed: Optional[int] = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        text = path.read_text()
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        return cls.from_dict(data or {}, seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    # ---- typed views consumed by the library

    def model_config(self, vocab_size: int = 32) -> ModelConfig:
        return ModelConfig(**asdict(self.model), vocab_size=vocab_size)

    def spec_aug(self) -> SpecAugPolicy:
        return SpecAugPolicy(**asdict(self.features), seed=self.seed)

    def adapter_spec(self, in_out_dim: Optional[int] = None) -> AdapterSpec:
        a = self.adapter
        return AdapterSpec(
            tuple(a.positions), a.emb_dim, in_out_dim or self.model.attn_dim, a.init, a.activation, a.init_std
        )

    def regime(self) -> DataRegime:
        t = self.train
        return DataRegime(t.real_count, t.simu_count, t.held_out_condition, t.multi_condition_quota, self.seed)

    def pretrain_plan(self, workers: int = 1) -> TrainPlan:
        t = self.train
        return TrainPlan(
            "pretrain", t.epochs, self.seed, t.lr, t.warmup_steps, t.batch_size, t.grad_clip, t.label_smoothing,
            DataRegime(seed=self.seed), self.spec_aug(), top_k=t.top_k, max_steps=t.max_steps, workers=workers,
        )

    def adapt_plan(self, workers: int = 1, with_frontend: Optional[bool] = None) -> TrainPlan:
        t, fe = self.train, self.frontend
        use_fe = fe.kind is not None if with_frontend is None else with_frontend
        spec = self.adapter_spec() if (not use_fe or fe.with_adapter) else None
        return TrainPlan(
            "adapt_with_se" if use_fe else "adapt",
            t.adapt_epochs, self.seed, t.adapt_lr, t.adapt_warmup_steps, t.batch_size, t.grad_clip,
            t.label_smoothing, self.regime(), self.spec_aug(), spec, fe.kind if use_fe else None,
            t.se_weight, t.se_loss, t.top_k, t.max_steps, workers=workers,
        )
