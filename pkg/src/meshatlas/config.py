"""Experiment configuration: nested YAML mapped onto dataclasses."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .model import ArchConfig
from .synthdata import DeformConfig
from .training import TrainConfig

OUT_ENV = "MESHATLAS_OUT"
MODEL_CHOICES = ("fc", "gcn", "pooling", "proposed", "pca")


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "meshatlas-out"))


@dataclass
class Paths:
    """Artifact locations; relative entries resolve against `root`."""

    root: str = ""
    hierarchy: str = "hierarchy"
    cohort: str = "cohort"
    checkpoints: str = "checkpoints"
    reports: str = "reports"

    def resolve(self, name: str) -> Path:
        base = Path(self.root) if self.root else default_out_root()
        p = Path(getattr(self, name))
        return p if p.is_absolute() else base / p


@dataclass
class DataConfig:
    cases: int = 124
    levels: int = 3
    # subdivisions of the icosahedron before the coarsest level (1 gives 42/162/642)
    base_subdivisions: int = 1
    unit_scale: float = 256.0
    deform: DeformConfig = field(default_factory=DeformConfig)


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: str = "proposed"
    paths: Paths = field(default_factory=Paths)
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pca_k: int = 10

    def __post_init__(self):
        if self.model not in MODEL_CHOICES:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODEL_CHOICES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"]["fc_hidden"] = list(self.arch.fc_hidden)
        d["data"]["deform"] = self.data.deform.to_dict()
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}".lstrip("."))
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    return config_from_dict(yaml.safe_load(path.read_text()))
