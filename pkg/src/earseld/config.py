"""Experiment configuration: one YAML file plus command-line overrides."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import yaml

from .errors import ConfigError
from .scenes import DatasetConfig


@dataclass
class ExperimentConfig:
    data_dir: str = "data"
    out_dir: str = "runs"
    scale: float = 1.0 / 16
    paper_scale: bool = False
    seed: int = 0
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    conditions: List[str] = field(default_factory=lambda: ["B", "D", "F"])
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.01
    val_fraction: float = 0.1
    desk_width: bool = False
    workers: int = 1
    # dataset knobs forwarded to DatasetConfig when set
    dataset: dict = field(default_factory=dict)

    def dataset_config(self) -> DatasetConfig:
        scale = 1.0 if self.paper_scale else self.scale
        try:
            return DatasetConfig(**{"scale": scale, "seed": self.seed, **self.dataset})
        except TypeError as exc:
            raise ConfigError(f"bad dataset option: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Defaults, then the YAML file, then non-None overrides."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        values.update(loaded)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return ExperimentConfig(**values)
