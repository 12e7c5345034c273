"""Run configuration and its TOML representation.

Example file::

    seed = 0
    out_dir = "runs/toy"
    corpus = "data/corpus.txt"
    seq_len = 128
    batch_tokens = 4096
    steps = 200

    [model]
    n_layers = 2
    d_model = 64

    [schedule]
    warmup_steps = 20
    stable_end = 160
    decay_steps = 40
    max_lr = 3e-3

    [optimizer]
    weight_decay = 0.1
    clip_norm = 1.0

    [sft]
    lr = 2e-5

    [dpo]
    lr = 5e-7
    eta = 0.1
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..errors import ConfigurationError
from ..model import ModelConfig
from ..optim import WsdSchedule

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0


@dataclass(frozen=True)
class FinetuneConfig:
    """Hyperparameters of a fine-tuning stage (constant learning rate).

    ``steps`` overrides the epoch-derived step count when set.
    """

    lr: float
    batch_size: int
    epochs: int
    steps: int | None = None
    eta: float = 0.1  # DPO only


def default_sft() -> FinetuneConfig:
    return FinetuneConfig(lr=2e-5, batch_size=128, epochs=3)


def default_dpo() -> FinetuneConfig:
    return FinetuneConfig(lr=5e-7, batch_size=128, epochs=1, eta=0.1)


def toy_schedule() -> WsdSchedule:
    return WsdSchedule(warmup_steps=20, stable_end=160, decay_steps=40, max_lr=3e-3)


@dataclass(frozen=True)
class TrainRunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: WsdSchedule = field(default_factory=toy_schedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sft: FinetuneConfig = field(default_factory=default_sft)
    dpo: FinetuneConfig = field(default_factory=default_dpo)
    seq_len: int = 128
    batch_tokens: int = 4096
    steps: int = 200
    seed: int = 0
    corpus: str | None = None
    out_dir: str = "runs/default"
    checkpoint_interval: int = 0  # 0: final checkpoint only
    log_interval: int = 1
    phase2_corpus: str | None = None  # swapped in at phase2_start
    phase2_start: int | None = None

    def __post_init__(self):
        if self.seq_len <= 0 or self.batch_tokens <= 0:
            raise ConfigurationError("seq_len and batch_tokens must be positive")
        if self.batch_tokens % self.seq_len:
            raise ConfigurationError(f"batch_tokens ({self.batch_tokens}) must be a multiple of "
                                     f"seq_len ({self.seq_len})")
        if self.seq_len > self.model.max_positions:
            raise ConfigurationError(f"seq_len {self.seq_len} exceeds max_positions {self.model.max_positions}")
        if self.steps < 0 or self.log_interval <= 0 or self.checkpoint_interval < 0:
            raise ConfigurationError("steps, log_interval and checkpoint_interval must be non-negative "
                                     "(log_interval positive)")
        if (self.phase2_corpus is None) != (self.phase2_start is None):
            raise ConfigurationError("phase2_corpus and phase2_start must be given together")

    @property
    def batch_size(self) -> int:
        return self.batch_tokens // self.seq_len

    @classmethod
    def jetmoe_8b(cls, **overrides) -> "TrainRunConfig":
        """Full-scale values: 4M-token batches of 4096-token sequences, max lr 5e-4.

        Warmup and decay lengths correspond to 10B and 250B tokens.
        """
        steps_per_token = 1 / 4_194_304
        base = dict(model=ModelConfig.jetmoe_8b(), seq_len=4096, batch_tokens=4_194_304,
                    schedule=WsdSchedule(warmup_steps=round(10e9 * steps_per_token),
                                         stable_end=round(1e12 * steps_per_token),
                                         decay_steps=round(250e9 * steps_per_token), max_lr=5e-4),
                    steps=round(1.25e12 * steps_per_token))
        base.update(overrides)
        return cls(**base)

    def with_overrides(self, **kw) -> "TrainRunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"model": ModelConfig, "schedule": WsdSchedule, "optimizer": OptimizerConfig,
             "sft": FinetuneConfig, "dpo": FinetuneConfig}


def _section(name: str, cls, values: dict, default):
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return replace(default, **values) if default is not None else cls(**values)


def run_config_from_dict(d: dict, base_dir: Path | None = None) -> TrainRunConfig:
    d = dict(d)
    base = TrainRunConfig()
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in d:
            kwargs[name] = _section(name, cls, d.pop(name), getattr(base, name))
    top = {f.name for f in fields(TrainRunConfig)} - set(_SECTIONS)
    unknown = set(d) - top
    if unknown:
        raise ConfigurationError(f"unknown top-level config keys: {sorted(unknown)}")
    for key in ("corpus", "phase2_corpus", "out_dir"):
        if base_dir is not None and d.get(key) is not None and not Path(d[key]).is_absolute():
            d[key] = str(base_dir / d[key])
    try:
        return TrainRunConfig(**d, **kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def load_run_config(path) -> TrainRunConfig:
    """Read a TOML run config; relative paths resolve against the file's directory."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return run_config_from_dict(raw, base_dir=path.parent)
