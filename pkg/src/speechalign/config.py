"""Pipeline configuration (TOML or JSON).

Every section is optional; omitted values take the defaults below. All
seeds are plain integers, never derived from the clock.

    [endpoint]
    base_url = "http://127.0.0.1:8799/v1"
    model = "local-model"

    [generation]
    mode = "descriptive"
    captions_per_audio = 1
    parallelism = 4

    [sampling]
    temperature = 1.0
    top_p = 1.0
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .adapter import AdapterConfig
from .corpus import DEFAULT_CAPTION_CAP, BalancePolicy
from .generation import (
    DEFAULT_CAPTION_PROMPT,
    DEFAULT_CAPTION_SYSTEM_PROMPT,
    DEFAULT_PROMPT_TEMPLATE,
    GenerationMode,
    RetryPolicy,
    SamplingConfig,
)
from .training import DEFAULT_CHAT_TEMPLATE, TrainConfig

# Small enough to train on a laptop CPU in seconds.
DESK_ADAPTER = AdapterConfig(
    d_enc=8, d_model=32, d_llm=64, n_queries=4, n_blocks=1, n_heads=2, n_enc_layers=3,
)


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://127.0.0.1:8799/v1"
    model: str = "local-model"
    timeout: float = 60.0
    retry_base_delay: float = 1.0
    retry_max_attempts: int = 5

    def retry_policy(self) -> RetryPolicy:
        return RetryPolicy(max_attempts=self.retry_max_attempts, base_delay=self.retry_base_delay)


@dataclass(frozen=True)
class GenerationConfig:
    mode: str = "descriptive"
    captions_per_audio: int = 1
    parallelism: int = 4
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    system_prompt: str = DEFAULT_CAPTION_SYSTEM_PROMPT
    caption_prompt: str = DEFAULT_CAPTION_PROMPT

    def generation_mode(self) -> GenerationMode:
        return GenerationMode.parse(self.mode)


@dataclass(frozen=True)
class BalanceConfig:
    caps: dict = field(default_factory=dict)
    default_cap: int = DEFAULT_CAPTION_CAP
    rng_seed: int = 0
    val_fraction: float = 0.0

    def policy(self) -> BalancePolicy:
        return BalancePolicy(dict(self.caps), self.rng_seed, self.default_cap)


@dataclass(frozen=True)
class TrainSection:
    train: TrainConfig = TrainConfig(lr=1e-2, warmup_steps=20, batch_size=8, epochs=50)
    frame_rate: float = 10.0
    transcription: str = "ground_truth"
    chat_template: str = DEFAULT_CHAT_TEMPLATE
    lm_hidden: int = 512
    lm_d_att: int = 64
    lm_weight_scale: float = 30.0


@dataclass(frozen=True)
class EvalConfig:
    judge: str = "rule"
    weighting: str = "task"
    parallelism: int = 4


@dataclass(frozen=True)
class Seeds:
    init: int = 0
    encoder: int = 0
    train: int = 0
    lm: int = 0
    client: int = 0


@dataclass(frozen=True)
class RunConfig:
    endpoint: EndpointConfig = EndpointConfig()
    generation: GenerationConfig = GenerationConfig()
    sampling: SamplingConfig = SamplingConfig()
    balance: BalanceConfig = BalanceConfig()
    adapter: AdapterConfig = DESK_ADAPTER
    training: TrainSection = TrainSection()
    eval: EvalConfig = EvalConfig()
    seeds: Seeds = Seeds()

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _build(cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown keys in [{cls.__name__}]: {sorted(unknown)}")
    return cls(**data)


def from_dict(data: dict) -> RunConfig:
    data = dict(data)
    base = RunConfig()
    kwargs = {}
    simple = {"endpoint": EndpointConfig, "generation": GenerationConfig, "sampling": SamplingConfig,
              "balance": BalanceConfig, "adapter": AdapterConfig, "eval": EvalConfig, "seeds": Seeds}
    for name, cls in simple.items():
        if name in data:
            merged = {**asdict(getattr(base, name)), **data.pop(name)}
            kwargs[name] = _build(cls, merged)
    if "training" in data:
        section = dict(data.pop("training"))
        train_keys = {f.name for f in fields(TrainConfig)}
        tc = {k: section.pop(k) for k in list(section) if k in train_keys}
        merged_tc = {**asdict(base.training.train), **tc}
        kwargs["training"] = _build(TrainSection, {**asdict(base.training),
                                                   "train": TrainConfig(**merged_tc), **section})
    if data:
        raise ValueError(f"unknown config sections: {sorted(data)}")
    return RunConfig(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    data = tomli.loads(text) if path.suffix == ".toml" else json.loads(text)
    return from_dict(data)
