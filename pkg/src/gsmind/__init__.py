"""gsmind: instance-aware 3D Gaussian mapping, dynamic scene graphs, grounding."""

__version__ = "0.1.0"

from .geometry import GaussianSplat, Intrinsics, Pose, look_at, project_point
from .mapstate import GaussianMap, InstanceRecord
from .renderer import RenderOutput, oracle_render, render_frame
from .splats import GaussianField

__all__ = [
    "GaussianField",
    "GaussianMap",
    "GaussianSplat",
    "InstanceRecord",
    "Intrinsics",
    "Pose",
    "RenderOutput",
    "look_at",
    "oracle_render",
    "project_point",
    "render_frame",
    "__version__",
]
