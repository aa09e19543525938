"""The persistent map: Gaussian field + voxel grid + instance records."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .splats import GaussianField
from .voxelmap import VoxelMap


@dataclass
class ObservingView:
    """One historical view of an instance, enough to rank best views."""

    frame_id: int
    pose: Pose
    mask_pixels: int
    image_pixels: int


@dataclass
class InstanceRecord:
    """Persistent map instance: fused feature, weight, ownership, views."""

    id: int
    feature: np.ndarray  # (D,) fused, not renormalized
    weight: float = 0.0  # W, accumulated fusion weight
    owned_gaussians: list = field(default_factory=list)
    views: list = field(default_factory=list)  # list[ObservingView]

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)

    def unit_feature(self) -> np.ndarray:
        norm = np.linalg.norm(self.feature)
        return self.feature / norm if norm > 0 else self.feature


@dataclass
class GaussianMap:
    gaussians: GaussianField = field(default_factory=GaussianField.empty)
    voxels: VoxelMap = field(default_factory=VoxelMap)
    records: dict = field(default_factory=dict)  # id -> InstanceRecord
    next_instance_id: int = 0
    feature_dim: int = 512

    def new_instance_id(self) -> int:
        iid = self.next_instance_id
        self.next_instance_id += 1
        return iid

    def alive_instance_gaussians(self, instance_id: int) -> np.ndarray:
        rec = self.records[instance_id]
        ids = np.asarray(rec.owned_gaussians, dtype=np.int64)
        if len(ids) == 0:
            return ids
        return ids[self.gaussians.alive[ids]]

    def instance_centers(self, instance_id: int) -> np.ndarray:
        ids = self.alive_instance_gaussians(instance_id)
        return self.gaussians.centers[ids]

    def copy(self) -> "GaussianMap":
        import copy as _copy

        return GaussianMap(
            gaussians=self.gaussians.copy(),
            voxels=_copy.deepcopy(self.voxels),
            records=_copy.deepcopy(self.records),
            next_instance_id=self.next_instance_id,
            feature_dim=self.feature_dim,
        )
