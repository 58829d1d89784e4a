"""Layered run configuration: defaults <- preset <- config file <- flags.

Config files are flat ``key = value`` lines; ``#`` starts a comment. Keys
carry a section prefix (``model.``, ``train.``, ``bench.``, ``data.``) except
the globals ``seed``, ``out`` and ``precision``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .autodiff import ConfigError

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "out": "runs/latest",
    "precision": "f32",
    "model.name": "para-former-1-6",
    "model.dim": 64,
    "model.heads": 4,
    "model.ffn_dim": 128,
    "model.patch": 4,
    "model.variant": "practical",
    "model.activation": "",
    "model.aggregation": "sum",
    "data.path": "",
    "data.format": "cifar10",
    "train.epochs": 20,
    "train.batch_size": 64,
    "train.lr": 3e-4,
    "train.optimizer": "adam",
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.momentum": 0.0,
    "train.weight_decay": 0.0,
    "train.train_n": 47500,
    "train.val_n": 2500,
    "train.test_n": 0,
    "bench.workers": 8,
    "bench.reps": 20,
    "bench.warmup": 3,
    "bench.pinning": "none",
}

PRESETS: dict[str, dict[str, object]] = {
    "desk-cifar10": {"train.train_n": 5000, "train.val_n": 500, "train.epochs": 20},
    "full-cifar10": {"train.train_n": 47500, "train.val_n": 2500, "train.epochs": 500},
}


def _coerce(key: str, raw) -> object:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {type(default).__name__}, got {raw!r}") from None
    return raw.strip()


def parse_text(text: str) -> dict[str, str]:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


@dataclass
class Config:
    values: dict[str, object] = field(default_factory=lambda: dict(DEFAULTS))
    sources: dict[str, str] = field(default_factory=lambda: {k: "default" for k in DEFAULTS})

    def set(self, key: str, value, source: str) -> None:
        self.values[key] = _coerce(key, value)
        self.sources[key] = source

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> dict[str, object]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def to_text(self) -> str:
        lines = []
        for key in DEFAULTS:
            lines.append(f"{key} = {self.values[key]}  # {self.sources[key]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def resolve(cls, preset: str | None = None, path=None, flags: dict | None = None) -> "Config":
        cfg = cls()
        if preset:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            for k, v in PRESETS[preset].items():
                cfg.set(k, v, f"preset:{preset}")
        if path:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file {path} not found")
            for k, v in parse_text(p.read_text()).items():
                cfg.set(k, v, f"file:{path}")
        for k, v in (flags or {}).items():
            if v is not None:
                cfg.set(k, v, "flag")
        return cfg

    @classmethod
    def from_text(cls, text: str, source: str = "text") -> "Config":
        cfg = cls()
        for k, v in parse_text(text).items():
            cfg.set(k, v, source)
        return cfg
