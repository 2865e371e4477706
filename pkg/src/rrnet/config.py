"""``key = value`` run configuration with validated defaults."""

from __future__ import annotations

import difflib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .codec import DEFAULT_VAR_THRESHOLD, QP_RANGE


class ConfigError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        prefix = f"line {lineno}: " if lineno is not None else ""
        super().__init__(prefix + message)
        self.lineno = lineno


@dataclass
class RunConfig:
    # codec
    var_threshold: float = DEFAULT_VAR_THRESHOLD
    # dataset
    patch_size: int = 64
    patch_stride: int = 64
    qps: tuple = (22, 27, 32, 37)
    base_qp: int = 37
    # model
    stem_channels: int = 64
    block_channels: int = 64
    edsr_channels: int = 32
    # optimisation
    base_lr: float = 1e-4
    lr_gamma: float = 0.1
    lr_interval: int = 100
    total_epochs: int = 120
    epochs: int = 60
    finetune_epochs: int = 20
    batch_size: int = 16
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # filtering
    tile_overlap: int = 8

    def validate(self) -> "RunConfig":
        positive = (
            "patch_size", "patch_stride", "stem_channels", "block_channels", "edsr_channels",
            "base_lr", "lr_interval", "total_epochs", "batch_size", "eps",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "finetune_epochs", "weight_decay", "var_threshold", "tile_overlap", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0 < self.lr_gamma <= 1:
            raise ConfigError("lr_gamma must be in (0, 1]")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in [0, 1)")
        if self.patch_size % 4:
            raise ConfigError("patch_size must be divisible by 4")
        if self.tile_overlap >= self.patch_size:
            raise ConfigError("tile_overlap must be smaller than patch_size")
        if not self.qps:
            raise ConfigError("qps must not be empty")
        for qp in (*self.qps, self.base_qp):
            if not QP_RANGE[0] <= qp <= QP_RANGE[1]:
                raise ConfigError(f"qp {qp} outside [0, 51]")
        return self

    def as_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(name: str, raw: str, lineno: int):
    default = getattr(RunConfig, name)
    try:
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} for {name}", lineno) from None


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if key not in _FIELDS:
            near = difflib.get_close_matches(key, list(_FIELDS), n=1, cutoff=0.0)
            hint = f"; nearest valid key is {near[0]!r}" if near else ""
            raise ConfigError(f"unknown key {key!r}{hint}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        values[key] = _parse_value(key, raw, lineno)
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
