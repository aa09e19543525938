"""Pipeline configuration with JSON overrides.

Defaults reproduce every constant used by the pipeline; a config file only
needs the keys it changes, e.g. {"optimizer": {"final_iters": 200}}.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .instances import DEFAULT_TAU, LAMBDA_GEO, LAMBDA_IOU, LAMBDA_SEM, MIN_OBSERVATION_AREA
from .optimizer import OptimizerConfig
from .updater import DELTA_CHANGE, RefineConfig


@dataclass
class AssociationConfig:
    tau: float = DEFAULT_TAU
    lam_geo: float = LAMBDA_GEO
    lam_iou: float = LAMBDA_IOU
    lam_sem: float = LAMBDA_SEM
    min_obs_area: int = MIN_OBSERVATION_AREA
    block_border_spawns: bool = True


@dataclass
class VoxelConfig:
    resolution: float = 0.02
    max_depth: float = 8.0


@dataclass
class ChangeConfig:
    delta_change: float = DELTA_CHANGE
    refine_iters: int = 200


@dataclass
class GroundingConfig:
    top_k: int = 5


@dataclass
class PipelineConfig:
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    change: ChangeConfig = field(default_factory=ChangeConfig)
    grounding: GroundingConfig = field(default_factory=GroundingConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        cfg = cls()
        for section_name, overrides in (doc or {}).items():
            section = getattr(cfg, section_name, None)
            if section is None or not isinstance(overrides, dict):
                raise KeyError(f"unknown config section {section_name!r}")
            for key, value in overrides.items():
                if not hasattr(section, key):
                    raise KeyError(f"unknown config key {section_name}.{key}")
                setattr(section, key, value)
        return cfg

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        with open(str(path), "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
