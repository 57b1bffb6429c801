"""Configuration records and the strict JSON loader used by the CLI."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, TypeVar


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the desk-scale toy model."""

    T: int = 8
    C: int = 64
    K: int = 6
    radius: int = 3
    L: int = 3
    gamma: float = 0.8
    stride: int = 4
    mixer_depth: int = 4
    mixer_hidden: int = 128
    token_expansion: float = 4.0
    channel_expansion: float = 0.5
    enc_freqs: int = 8
    enc_scale: float = 96.0
    encoder_widths: tuple[int, ...] = (32, 48, 64)
    encoder_blocks: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if self.K < 1 or self.L < 1 or self.T < 2 or self.radius < 0:
            raise ConfigError("need K >= 1, L >= 1, T >= 2, radius >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        max_stride = 2 ** len(self.encoder_widths)
        if self.stride not in [2**i for i in range(1, len(self.encoder_widths) + 1)]:
            raise ConfigError(f"stride must be a power of two between 2 and {max_stride}, got {self.stride}")

    @property
    def P(self) -> int:
        return 2 * self.radius + 1

    @property
    def corr_dim(self) -> int:
        return self.P * self.P * self.L

    @property
    def enc_dim(self) -> int:
        return 4 * self.enc_freqs

    @property
    def token_dim(self) -> int:
        return self.C + self.corr_dim + self.enc_dim

    @property
    def head_dim(self) -> int:
        return self.T * (self.C + 2)

    @classmethod
    def full(cls) -> "ModelConfig":
        return cls(T=8, C=256, K=6, radius=3, L=4, stride=8, mixer_depth=12, mixer_hidden=512,
                   enc_freqs=16, enc_scale=512.0, encoder_widths=(64, 96, 128), encoder_blocks=2)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 2
    n_queries: int = 16
    lr: float = 3e-4
    warmup_frac: float = 0.05
    initial_frac: float = 0.04
    final_frac: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if self.steps < 1 or self.n_queries < 1 or self.batch_size < 1:
            raise ConfigError("steps, batch_size and n_queries must be >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")


T_ = TypeVar("T_")


def from_dict(cls: type[T_], data: dict[str, Any] | None, where: str = "") -> T_:
    """Build a dataclass from ``data``, rejecting unknown keys by name."""
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError("unknown config key(s): " + ", ".join(prefix + k for k in unknown))
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from None


def to_dict(obj) -> dict[str, Any]:
    out = dataclasses.asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def check_keys(data: dict[str, Any], allowed: set[str], where: str = "") -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError("unknown config key(s): " + ", ".join(prefix + k for k in unknown))


