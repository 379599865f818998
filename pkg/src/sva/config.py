"""Flat ``key = value`` experiment configuration files."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

CONTROL_NAMES = ("none", "order1", "order2")
OUTPUT_DIR_ENV = "SVA_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(",") if p.strip())


def _names(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    model_name: str = "ou_quartic"
    epsilon_list: tuple[float, ...] = (0.5, 0.25, 0.125, 0.0625)
    controls: tuple[str, ...] = CONTROL_NAMES
    n_traj: int = 100_000
    dt: float = 5e-3
    seed: int = 20240101
    output_dir: str = field(default_factory=lambda: os.environ.get(OUTPUT_DIR_ENV, "sva_output"))
    record_deviation: bool = True
    record_residual: bool = True
    two_run_rho: bool = False
    dump_samples: bool = False
    common_random_numbers: bool = True
    n_workers: int = 1
    n_bootstrap: int = 200
    timestamp: bool = True
    oracle: bool = True
    a: float = 1.0
    q: float = 1.0
    relax: float = 0.5
    tol: float = 1e-10
    max_iter: int = 500

    def __post_init__(self):
        if not self.epsilon_list:
            raise ConfigError("epsilon_list must not be empty")
        if any(not e > 0 for e in self.epsilon_list):
            raise ConfigError("epsilon values must be positive")
        if len(set(self.epsilon_list)) != len(self.epsilon_list):
            raise ConfigError("epsilon values must be distinct")
        if not self.controls or any(c not in CONTROL_NAMES for c in self.controls):
            raise ConfigError(f"controls must be a nonempty subset of {CONTROL_NAMES}")
        if self.n_traj < 2:
            raise ConfigError("n_traj must be at least 2")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.n_workers < 1:
            raise ConfigError("n_workers must be at least 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def model_params(self) -> dict:
        return {"a": self.a, "q": self.q} if self.model_name == "lq" else {}


_PARSERS = {
    "model_name": str.strip, "model": str.strip,
    "epsilon_list": _floats, "controls": _names,
    "n_traj": lambda s: int(float(s)), "dt": float, "seed": int, "output_dir": str.strip,
    "record_deviation": _bool, "record_residual": _bool, "two_run_rho": _bool, "dump_samples": _bool,
    "common_random_numbers": _bool, "n_workers": int, "n_bootstrap": int, "timestamp": _bool,
    "oracle": _bool, "a": float, "q": float, "relax": float, "tol": float, "max_iter": int,
}


def parse_config(text: str, **overrides) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            parsed = _PARSERS[key](val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        values["model_name" if key == "model" else key] = parsed
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    return ExperimentConfig(**{k: v for k, v in values.items() if k in known})


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, **overrides)
