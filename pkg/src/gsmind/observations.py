"""Per-frame observation containers shared across modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ZeroFeature
from .geometry import Pose

FEATURE_NORM_TOL = 1e-6


@dataclass
class InstanceObservation:
    """One detected 2D instance: binary mask plus a unit semantic feature."""

    mask: np.ndarray  # (H, W) bool
    feature: np.ndarray  # (D,) unit norm
    frame_id: int = 0
    box: tuple | None = None  # optional detector box (x0, y0, x1, y1)
    class_hint: str | None = None
    label: int | None = None  # source value in the bundle label image

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(self.feature)
        if norm <= FEATURE_NORM_TOL:
            raise ZeroFeature("observation feature has zero norm")
        if not self.mask.any():
            raise ValueError("observation mask is empty")

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass
class FrameObservation:
    """Posed RGB-D frame with its per-instance observations."""

    frame_id: int
    color: np.ndarray  # (H, W, 3) float in [0, 1]
    depth: np.ndarray  # (H, W) float m
    pose: Pose
    observations: list = field(default_factory=list)
    label_image: np.ndarray | None = None  # (H, W) int, 0 = background
