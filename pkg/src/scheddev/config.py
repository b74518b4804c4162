"""Structured run configuration read from TOML.

Every command reads the sections it needs from one file; unknown keys and
mistyped values are rejected with the dotted key path so typos never pass
silently. Seeds are deliberately not part of the file.

Sections and keys (defaults in parentheses)::

    [schedule]  kind ("LogLinearVE"), sigma_min (0.008), sigma_max (10.0)
    [dataset]   support ("Discrete"), anchors ([[0,-1],[1,0],[1,1]]),
                noise_sigma (0.1), count (100000)
    [grid]      z_min (0.0), z_max (1.0), z_points (5)
    [sampler]   algorithm ("DDIM"), steps (128), count (512), ge_mu (2.0),
                discretization ("sigma")
    [sd]        n_outer (512), n_imcf (20000), s_points (16),
                divergence ("analytic"), fd_step (1e-4), oracle_sampler ("DDPM"),
                oracle_steps (128), report_c2_one (true)
    [kernel]    c1 (1.5), c2 (16.0)
    [train]     iterations (10000), batch (128), lr (0.004), weight_decay (0.01),
                train_steps (1024), width (64), n_layers (5), n_freq (16)
    [family]    kind ("linear"; one of linear, kernel, imcf, nn), model ("")
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

__all__ = ["ConfigError", "RunConfig", "load_config", "config_from_dict"]


class ConfigError(ValueError):
    """Bad configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ScheduleSection:
    kind: str = "LogLinearVE"
    sigma_min: float = 8e-3
    sigma_max: float = 10.0


@dataclass
class DatasetSection:
    support: str = "Discrete"
    anchors: list = field(default_factory=lambda: [[0.0, -1.0], [1.0, 0.0], [1.0, 1.0]])
    noise_sigma: float = 0.1
    count: int = 100_000


@dataclass
class GridSection:
    z_min: float = 0.0
    z_max: float = 1.0
    z_points: int = 5


@dataclass
class SamplerSection:
    algorithm: str = "DDIM"
    steps: int = 128
    count: int = 512
    ge_mu: float = 2.0
    discretization: str = "sigma"


@dataclass
class SDSection:
    n_outer: int = 512
    n_imcf: int = 20_000
    s_points: int = 16
    divergence: str = "analytic"
    fd_step: float = 1e-4
    oracle_sampler: str = "DDPM"
    oracle_steps: int = 128
    report_c2_one: bool = True


@dataclass
class KernelSection:
    c1: float = 1.5
    c2: float = 16.0


@dataclass
class TrainSection:
    iterations: int = 10_000
    batch: int = 128
    lr: float = 4e-3
    weight_decay: float = 0.01
    train_steps: int = 1024
    width: int = 64
    n_layers: int = 5
    n_freq: int = 16


@dataclass
class FamilySection:
    kind: str = "linear"
    model: str = ""


_CHOICES = {
    "schedule.kind": {"LogLinearVE"},
    "dataset.support": {"Discrete", "Continuous"},
    "sampler.algorithm": {"DDPM", "DDIM", "GE"},
    "sampler.discretization": {"sigma", "euler"},
    "sd.divergence": {"analytic", "random", "fd"},
    "sd.oracle_sampler": {"DDPM", "DDIM", "GE"},
    "family.kind": {"linear", "kernel", "imcf", "nn"},
}

_POSITIVE = {
    "schedule.sigma_min", "schedule.sigma_max", "dataset.count", "grid.z_points",
    "sampler.steps", "sampler.count", "sd.n_outer", "sd.n_imcf", "sd.s_points",
    "sd.fd_step", "sd.oracle_steps", "kernel.c1", "kernel.c2", "train.iterations",
    "train.batch", "train.lr", "train.train_steps", "train.width", "train.n_layers",
    "train.n_freq",
}


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    grid: GridSection = field(default_factory=GridSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    sd: SDSection = field(default_factory=SDSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    train: TrainSection = field(default_factory=TrainSection)
    family: FamilySection = field(default_factory=FamilySection)

    def echo(self) -> dict:
        return asdict(self)


def _coerce(key, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return value
    return value


def _check_anchors(anchors):
    for i, pair in enumerate(anchors):
        ok = isinstance(pair, list) and len(pair) == 2 and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in pair)
        if not ok:
            raise ConfigError(f"dataset.anchors[{i}]", f"expected [z, x], got {pair!r}")
    if not anchors:
        raise ConfigError("dataset.anchors", "at least one anchor is required")
    return [[float(a), float(b)] for a, b in anchors]


def config_from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a table")
    sections = {f.name for f in fields(RunConfig)}
    for name, body in raw.items():
        if name not in sections:
            raise ConfigError(name, f"unknown section (expected one of {sorted(sections)})")
        if not isinstance(body, dict):
            raise ConfigError(name, "expected a table")
        section = getattr(cfg, name)
        known = {f.name for f in fields(section)}
        for key, value in body.items():
            path = f"{name}.{key}"
            if key not in known:
                raise ConfigError(path, f"unknown key (expected one of {sorted(known)})")
            value = _coerce(path, getattr(section, key), value)
            if path in _CHOICES and value not in _CHOICES[path]:
                raise ConfigError(path, f"expected one of {sorted(_CHOICES[path])}, got {value!r}")
            if path in _POSITIVE and value <= 0:
                raise ConfigError(path, f"must be positive, got {value!r}")
            if path == "dataset.anchors":
                value = _check_anchors(value)
            setattr(section, key, value)
    if cfg.schedule.sigma_min >= cfg.schedule.sigma_max:
        raise ConfigError("schedule.sigma_min", "must be below schedule.sigma_max")
    if cfg.grid.z_min > cfg.grid.z_max:
        raise ConfigError("grid.z_min", "must not exceed grid.z_max")
    return cfg


def load_config(path) -> RunConfig:
    """Read a TOML file; a missing path means all defaults."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"{path}: {exc}") from exc
    return config_from_dict(raw)
