"""Strict TOML run configuration.

Unknown keys and wrongly typed values are errors that name the offending key
and the line it appears on. Every key is optional; absent keys take the
documented defaults below.

    seed = 42

    [data]        size, noise_sigma, n_train, n_test, smoothing
    [network]     input_size, levels, base_channels, leaky_slope, cr_enabled, deep_supervision
    [training]    lr, max_epochs, patience, factor, modality_dropout
    [eval]        threshold
    [paths]       out_dir, data_dir, checkpoint_dir, report
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .network import NetworkConfig
from .synthetic import PhantomSpec
from .training import TrainingConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    size: int | None = None  # defaults to network.input_size
    noise_sigma: float = 0.05
    n_train: int = 100
    n_test: int = 25
    smoothing: float = 0.8


@dataclass
class EvalConfig:
    threshold: float = 0.5


@dataclass
class PathsConfig:
    out_dir: str = "runs"
    data_dir: str | None = None
    checkpoint_dir: str | None = None
    report: str | None = None

    def resolve(self) -> "PathsConfig":
        out = Path(self.out_dir)
        return PathsConfig(
            out_dir=str(out),
            data_dir=self.data_dir or str(out / "data"),
            checkpoint_dir=self.checkpoint_dir or str(out / "checkpoint"),
            report=self.report or str(out / "report.csv"),
        )


@dataclass
class RunConfig:
    seed: int = 42
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(
            size=self.data.size,
            seed=self.seed,
            noise_sigma=self.data.noise_sigma,
            smoothing=self.data.smoothing,
        )

    def to_dict(self) -> dict:
        return asdict(self)


# keys a user may set per section; everything else in the dataclasses is internal
_ALLOWED = {
    "data": ("size", "noise_sigma", "n_train", "n_test", "smoothing"),
    "network": ("input_size", "levels", "base_channels", "leaky_slope", "cr_enabled", "deep_supervision"),
    "training": ("lr", "max_epochs", "patience", "factor", "modality_dropout"),
    "eval": ("threshold",),
    "paths": ("out_dir", "data_dir", "checkpoint_dir", "report"),
}
_SECTION_TYPES = {
    "data": DataConfig,
    "network": NetworkConfig,
    "training": TrainingConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}


def _find_line(text: str, section: str | None, key: str) -> int | None:
    current = None
    header = re.compile(r"^\s*\[([^\]]+)\]\s*(#.*)?$")
    assign = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = header.match(line)
        if m:
            current = m.group(1).strip()
            if section is not None and current == section and key == section:
                return lineno
            continue
        if current == section and assign.match(line):
            return lineno
    return None


def _error(text: str, section: str | None, key: str, message: str) -> ConfigError:
    path = f"{section}.{key}" if section else key
    line = _find_line(text, section, key)
    where = f" (line {line})" if line else ""
    return ConfigError(f"{path}{where}: {message}")


def _check_type(value, expected):
    """Coerce ints to floats where floats are expected; reject everything else."""
    if expected is bool:
        if isinstance(value, bool):
            return value
        raise TypeError("expected a boolean")
    if expected is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise TypeError("expected an integer")
    if expected is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise TypeError("expected a number")
    if expected is str:
        if isinstance(value, str):
            return value
        raise TypeError("expected a string")
    raise TypeError(f"unsupported type {expected}")


def _field_type(cls, name):
    for f in fields(cls):
        if f.name == name:
            t = f.type if isinstance(f.type, str) else f.type.__name__
            base = t.split("|")[0].strip()
            return {"int": int, "float": float, "bool": bool, "str": str}[base]
    raise KeyError(name)


def parse_config_text(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc

    cfg = RunConfig()
    for key, value in raw.items():
        if key == "seed":
            try:
                cfg.seed = _check_type(value, int)
            except TypeError as exc:
                raise _error(text, None, key, str(exc)) from None
            continue
        if key not in _ALLOWED:
            raise _error(text, None, key, "unknown key")
        if not isinstance(value, dict):
            raise _error(text, None, key, "expected a [section] table")
        section_cls = _SECTION_TYPES[key]
        kwargs = {}
        for sub, sub_value in value.items():
            if sub not in _ALLOWED[key]:
                raise _error(text, key, sub, "unknown key")
            try:
                kwargs[sub] = _check_type(sub_value, _field_type(section_cls, sub))
            except TypeError as exc:
                raise _error(text, key, sub, str(exc)) from None
        setattr(cfg, key, section_cls(**kwargs))

    cfg.training.seed = cfg.seed
    if cfg.data.size is None:
        cfg.data.size = cfg.network.input_size
    _validate(cfg, text)
    return cfg


def _validate(cfg: RunConfig, text: str) -> None:
    try:
        cfg.network.validate()
    except ValueError as exc:
        raise _error(text, "network", "input_size", str(exc)) from None
    if cfg.data.size != cfg.network.input_size:
        raise _error(text, "data", "size",
                     f"phantom size {cfg.data.size} differs from network.input_size {cfg.network.input_size}")
    if cfg.data.n_train <= 0 or cfg.data.n_test <= 0:
        raise _error(text, "data", "n_train", "n_train and n_test must be positive")
    if not 0.0 < cfg.eval.threshold < 1.0:
        raise _error(text, "eval", "threshold", "must lie in (0, 1)")
    if cfg.training.max_epochs < 1:
        raise _error(text, "training", "max_epochs", "must be >= 1")
    if not 0.0 < cfg.training.factor < 1.0:
        raise _error(text, "training", "factor", "must lie in (0, 1)")
    if cfg.training.patience < 1:
        raise _error(text, "training", "patience", "must be >= 1")


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())
