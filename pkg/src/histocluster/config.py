"""Run configuration shared by every pipeline stage."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .dcec import TrainConfig
from .qc import QcConfig


@dataclass
class RunConfig:
    tile_size: int = 224
    # source pixels per thumbnail pixel; defaults to the tile size
    scale: int | None = None
    min_component: int = 10
    qc_threshold: float = 4.0
    qc_train_cap: int = 2000
    qc: QcConfig = field(default_factory=QcConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample_per_cluster: int = 20
    alpha: float = 0.05
    ties: str = "efron"
    stars: str = "table"
    annotations: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scale is None:
            self.scale = self.tile_size
        if isinstance(self.qc, dict):
            self.qc = QcConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.qc.items()})
        if isinstance(self.train, dict):
            self.train = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.train.items()})
        if self.tile_size % 8:
            raise ValueError("tile size must be a multiple of 8")
        if self.ties not in ("efron", "breslow"):
            raise ValueError(f"unknown ties method {self.ties!r}")
        if self.stars not in ("table", "legend"):
            raise ValueError(f"unknown star scheme {self.stars!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def stage_seed(master, label):
    """Per-stage seed derived from the master seed by a labelled hash."""
    h = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(h[:4], "little")
