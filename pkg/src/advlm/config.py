"""Run configuration: ``section.key = value`` files with command-line overrides.

Every field has a default. Unknown sections or keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .adversarial import PerturbConfig
from .errors import ConfigInvalid, IoFailure
from .optim import KINDS


@dataclass
class DataConfig:
    train: str = ""
    valid: str = ""
    test: str = ""
    # When > 0, ignore the paths and generate a synthetic corpus of this many training tokens.
    synthetic_tokens: int = 0
    synthetic_vocab: int = 2000
    synthetic_seed: int = 0


@dataclass
class ModelConfig:
    emb_dim: int = 64
    hidden_dim: int = 64
    layers: int = 2
    tie_weights: bool = True
    dropout_emb: float = 0.1
    dropout_hid: float = 0.25
    weight_drop: float = 0.5
    variational: bool = True


@dataclass
class AdversarialConfig(PerturbConfig):
    gen_hidden: int = 64
    gen_input: str = "current"
    gen_proj_init: float = 0.01
    gen_zero_init: bool = False
    gen_lr_scale: float = 0.1


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 20
    bptt: int = 35
    clip: float = 0.25
    optimizer: str = "sgd"
    lr: float = 20.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    lr_decay: float = 0.5
    patience: int = 2
    seed: int = 1
    precision: int = 32
    eval_batch_size: int = 10
    max_steps_per_epoch: int = 0
    checkpoint_every: int = 0
    log_wall_time: bool = True
    report_clean_loss: bool = False
    out_dir: str = "run"


@dataclass
class BenchConfig:
    warmup: int = 3
    steps: int = 20


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    adversarial: AdversarialConfig = field(default_factory=AdversarialConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self) -> "RunConfig":
        for section, obj in _sections(self).items():
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, float) and not math.isfinite(v):
                    raise ConfigInvalid(f"{section}.{f.name} must be finite, got {v}")
        self.adversarial.validate()
        t, m = self.train, self.model
        positive = {
            "train.epochs": t.epochs,
            "train.batch_size": t.batch_size,
            "train.bptt": t.bptt,
            "train.eval_batch_size": t.eval_batch_size,
            "train.patience": t.patience,
            "model.emb_dim": m.emb_dim,
            "model.hidden_dim": m.hidden_dim,
            "model.layers": m.layers,
            "adversarial.gen_hidden": self.adversarial.gen_hidden,
            "bench.steps": self.bench.steps,
        }
        for key, v in positive.items():
            if v <= 0:
                raise ConfigInvalid(f"{key} must be positive, got {v}")
        if t.clip < 0 or t.lr < 0 or t.weight_decay < 0 or self.adversarial.gen_lr_scale < 0:
            raise ConfigInvalid("clip, lr, weight_decay and gen_lr_scale must be non-negative")
        if not 0 < t.lr_decay <= 1:
            raise ConfigInvalid(f"train.lr_decay must lie in (0, 1], got {t.lr_decay}")
        if t.optimizer not in KINDS:
            raise ConfigInvalid(f"train.optimizer must be one of {KINDS}, got {t.optimizer!r}")
        if t.precision not in (32, 64):
            raise ConfigInvalid(f"train.precision must be 32 or 64, got {t.precision}")
        for key in ("dropout_emb", "dropout_hid", "weight_drop"):
            if not 0 <= getattr(m, key) < 1:
                raise ConfigInvalid(f"model.{key} must lie in [0, 1)")
        if self.adversarial.gen_input not in ("current", "previous"):
            raise ConfigInvalid("adversarial.gen_input must be 'current' or 'previous'")
        return self

    def copy(self) -> "RunConfig":
        return parse_config(dump_config(self))


def _sections(cfg: RunConfig) -> dict[str, object]:
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def _coerce(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigInvalid(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def set_value(cfg: RunConfig, key: str, raw: str) -> None:
    key = key.strip()
    section, _, name = key.partition(".")
    sections = _sections(cfg)
    if section not in sections or not name:
        raise ConfigInvalid(f"unknown config key {key!r}")
    target = sections[section]
    hints = typing.get_type_hints(type(target))
    if name not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigInvalid(f"unknown config key {key!r}")
    setattr(target, name, _coerce(key, raw, hints[name]))


def parse_config(text: str, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"line {lineno}: expected 'section.key = value'")
        key, raw = line.split("=", 1)
        set_value(cfg, key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigInvalid(f"override {item!r} must look like KEY=VALUE")
        key, raw = item.split("=", 1)
        set_value(cfg, key, raw)
    return cfg.validate()


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise IoFailure(f"cannot read config {path}: {e}") from e
    return parse_config(text, overrides)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, obj in _sections(cfg).items():
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{section}.{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:16]
