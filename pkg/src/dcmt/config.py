"""Run configuration: one dataclass per module, loaded from ``key = value`` files.

Example::

    # comments start with '#'
    [data]
    labeled_fraction = 0.3

    [trainer_cli]
    method = dcmt
    epochs = 10

Unknown sections or keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import DataConfig
from .ema import EmaConfig
from .losses import LossConfig
from .model import ConfigError, NetworkConfig

METHODS = ("supervised", "mean_teacher", "dcmt_nac", "dcmt")
EVAL_MODELS = ("student", "teacher", "both")


@dataclass
class MetricsConfig:
    bin_threshold: float = 0.5


@dataclass
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.0001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    # 0 derives the value from epochs; tau_max then equals the last step index
    steps: int = 0
    tau_max: int = 0
    method: str = "dcmt"
    seed: int = 0
    eval_model: str = "teacher"
    augment: bool = True
    # std of Gaussian noise added to the teacher's input only; 0 feeds both the same image
    teacher_input_noise: float = 0.0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.eval_model not in EVAL_MODELS:
            raise ConfigError(f"eval_model must be one of {EVAL_MODELS}")
        if self.epochs < 1 and self.steps < 1:
            raise ConfigError("need epochs >= 1 or steps >= 1")
        if self.teacher_input_noise < 0:
            raise ConfigError("teacher_input_noise must be nonnegative")


SECTIONS = {
    "data": DataConfig,
    "model": NetworkConfig,
    "ema": EmaConfig,
    "losses": LossConfig,
    "metrics": MetricsConfig,
    "trainer_cli": TrainConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: NetworkConfig = field(default_factory=NetworkConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    trainer_cli: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.ema.validate()
        self.trainer_cli.validate()
        if self.losses.num_classes != self.model.num_classes:
            raise ConfigError("losses.num_classes must equal model.num_classes")
        if self.losses.lambda_a < 0 or self.losses.lambda_r < 0 or self.losses.eps <= 0:
            raise ConfigError("invalid loss configuration")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the run seed (initialization, sampling, augmentation) replaced."""
        cfg = dataclasses.replace(
            self,
            model=dataclasses.replace(self.model, seed=seed),
            trainer_cli=dataclasses.replace(self.trainer_cli, seed=seed),
        )
        return cfg

    @classmethod
    def from_dict(cls, d: dict[str, dict[str, Any]]) -> "RunConfig":
        cfg = cls()
        for section, values in d.items():
            target = getattr(cfg, section)
            for k, v in values.items():
                if k == "conv_widths":
                    v = tuple(v)
                setattr(target, k, v)
        return cfg


def _coerce(raw: str, current: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def apply_overrides(cfg: RunConfig, text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None
    )
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        target = getattr(cfg, section)
        known = {f.name for f in dataclasses.fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            setattr(target, key, _coerce(raw, getattr(target, key), f"{section}.{key}"))
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        apply_overrides(cfg, p.read_text(encoding="utf-8"), str(p))
    cfg.validate()
    return cfg
