"""Plain ``key = value`` configuration for the command line tools."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Any

from .depth_loss import LossWeights
from .metrics import DEFAULT_CAPS
from .toy import TrainConfig


class ConfigError(ValueError):
    pass


_DEMO = TrainConfig()


@dataclass(frozen=True)
class Config:
    beta: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 1.0
    gamma4: float = 1.0
    detach_u: bool = True
    caps: tuple = DEFAULT_CAPS
    demo_height: int = _DEMO.height
    demo_width: int = _DEMO.width
    demo_steps: int = _DEMO.steps
    demo_lr: float = _DEMO.lr
    demo_seed: int = _DEMO.seed
    demo_kd_scale: float = _DEMO.kd_scale

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ConfigError(f"beta must be finite and > 0, got {self.beta}")
        LossWeights(*self.gamma)  # validates
        if not self.caps or any(not (math.isfinite(c) and c > 0) for c in self.caps):
            raise ConfigError(f"caps must be positive, got {self.caps}")
        if self.demo_height <= 0 or self.demo_height % 32 or self.demo_width <= 0 or self.demo_width % 32:
            raise ConfigError("demo_height and demo_width must be positive multiples of 32")
        if self.demo_steps < 1:
            raise ConfigError("demo_steps must be >= 1")
        if not (math.isfinite(self.demo_lr) and self.demo_lr > 0):
            raise ConfigError("demo_lr must be > 0")
        if not (math.isfinite(self.demo_kd_scale) and self.demo_kd_scale >= 0):
            raise ConfigError("demo_kd_scale must be >= 0")

    @property
    def gamma(self) -> tuple:
        return (self.gamma1, self.gamma2, self.gamma3, self.gamma4)

    def loss_weights(self) -> LossWeights:
        return LossWeights(*self.gamma)

    def train_config(self, **overrides) -> TrainConfig:
        base = TrainConfig(
            gamma=self.loss_weights(),
            beta=self.beta,
            detach_u=self.detach_u,
            steps=self.demo_steps,
            lr=self.demo_lr,
            seed=self.demo_seed,
            height=self.demo_height,
            width=self.demo_width,
            kd_scale=self.demo_kd_scale,
        )
        return replace(base, **overrides)

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def updated(self, **values) -> "Config":
        try:
            return replace(self, **values)
        except ValueError as err:
            raise ConfigError(str(err)) from err


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(name: str, text: str):
    kind = {f.name: f.type for f in fields(Config)}[name]
    if kind == "bool":
        return _parse_bool(text)
    if kind == "int":
        return int(text)
    if kind == "tuple":
        return tuple(float(part) for part in text.split(",") if part.strip())
    return float(text)


def parse_value(name: str, text: str):
    """Parse one value for key ``name``; raises :class:`ConfigError` on bad input."""
    if name not in {f.name for f in fields(Config)}:
        raise ConfigError(f"unknown config key {name!r}")
    try:
        return _parse_value(name, text)
    except ValueError as err:
        raise ConfigError(f"bad value for {name}: {text!r}") from err


def loads(text: str, base: Config = Config()) -> Config:
    """Parse ``key = value`` lines; ``#`` starts a comment; later keys win."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key = key.strip()
        values[key] = parse_value(key, value.strip())
    return base.updated(**values)


def load(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
