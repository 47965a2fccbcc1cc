"""Experiment configuration and the flat ``key = value`` config file format.

Keys are dotted: ``recon.alpha = 0.5``, ``emtv.outer_iters = 40``.  Lines
starting with ``#`` and blank lines are ignored.  A ``[section]`` line sets a
prefix for the keys below it, so both spellings are accepted.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .emtv import EmtvOptions
from .fidelity import HyperelasticParams
from .motionreg import BfgsOptions, MultilevelOptions

__all__ = [
    "PhantomConfig",
    "OperatorConfig",
    "BaselineConfig",
    "ReconConfig",
    "Config",
    "ConfigError",
    "parse_config",
    "load_config",
    "apply_overrides",
    "dump_config",
]


class ConfigError(ValueError):
    pass


@dataclass
class PhantomConfig:
    kind: str = "ring"
    size: int = 64
    gates: int = 3
    shrink: tuple = (0.0, 0.12, 0.25)
    intensity: float = 1.0e7
    edge_width: float = 0.05
    rmax: float = 0.95


@dataclass
class OperatorConfig:
    kind: str = "blur"
    sigma: float = 0.04
    n_angles: int = 0
    n_bins: int = 0


@dataclass
class BaselineConfig:
    alpha: float = 1.0
    em_iters: int = 200  # same EM-step budget as 40 inner x 5 Bregman passes


@dataclass
class ReconConfig:
    gates: int = 3
    alpha: float = 1.0
    beta: float = 3.0e8
    hyper: HyperelasticParams = field(default_factory=HyperelasticParams)
    outer_alternations: int = 3
    emtv: EmtvOptions = field(default_factory=lambda: EmtvOptions(alpha=1.0, outer_iters=40, bregman_iters=5))
    bfgs: BfgsOptions = field(default_factory=lambda: BfgsOptions(max_iters=150))
    multilevel: MultilevelOptions = field(default_factory=MultilevelOptions)
    seed: int = 0

    def __post_init__(self):
        if self.gates < 1:
            raise ConfigError("gates must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("weights must be nonnegative")


@dataclass
class Config:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    scale: float = 1000.0


# short prefixes for nested recon sections
_ALIASES = {
    "emtv": "recon.emtv",
    "hyper": "recon.hyper",
    "bfgs": "recon.bfgs",
    "reg": "recon.bfgs",
    "multilevel": "recon.multilevel",
}


def _coerce(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            value = float(raw)
            if not value.is_integer():
                raise
            return int(value)
    if isinstance(current, float) or current is None:
        if current is None and raw.lower() in ("none", ""):
            return None
        return float(raw)
    if isinstance(current, tuple):
        return tuple(float(t) for t in raw.replace(",", " ").split())
    return raw


def _resolve(key: str) -> list[str]:
    head, _, rest = key.partition(".")
    if head in _ALIASES:
        key = _ALIASES[head] + ("." + rest if rest else "")
    return key.split(".")


def set_value(cfg: Config, key: str, raw: str) -> None:
    parts = _resolve(key)
    obj = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, p):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, p)
    name = parts[-1]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, name)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{key!r} is a section, not a value")
    try:
        setattr(obj, name, _coerce(raw, current))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def _validate(cfg: Config) -> Config:
    # rerun the dataclass checks after field-wise assignment
    try:
        for obj in (cfg.recon.emtv, cfg.recon.bfgs, cfg.recon.multilevel, cfg.recon.hyper, cfg.recon):
            obj.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def parse_config(text: str, base: Config | None = None) -> Config:
    cfg = base or Config()
    prefix = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            prefix = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if prefix:
            key = f"{prefix}.{key}"
        set_value(cfg, key, value)
    return _validate(cfg)


def load_config(path=None, overrides=None) -> Config:
    cfg = Config()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config(text, cfg)
    return apply_overrides(cfg, overrides or [])


def apply_overrides(cfg: Config, overrides) -> Config:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        set_value(cfg, key.strip(), value)
    return _validate(cfg)


def _walk(obj, prefix=""):
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(val):
            yield from _walk(val, key + ".")
        else:
            if isinstance(val, tuple):
                val = " ".join(repr(float(v)) for v in val)
            yield key, val


def dump_config(cfg: Config) -> str:
    return "".join(f"{k} = {v}\n" for k, v in _walk(cfg))
