"""Shared fixtures: random Gaussian fields and a small mapped scene."""

from __future__ import annotations

import numpy as np
import pytest

from gsmind.config import PipelineConfig
from gsmind.geometry import Intrinsics, look_at
from gsmind.pipeline import MappingPipeline
from gsmind.splats import GaussianField
from gsmind.synth import SceneObject, SceneSpec, generate_bundle


def random_field(n: int, rng: np.random.Generator,
                 z_range=(1.0, 3.0),
                 logit_range=(-2.0, 0.2),
                 instance_ids=True) -> GaussianField:
    """Random well-conditioned field; opacities stay below the clamp and
    transmittance never reaches the termination cutoff, so the blend is
    smooth for finite differences."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianField.from_arrays(
        centers=rng.uniform([-0.5, -0.5, z_range[0]], [0.5, 0.5, z_range[1]], size=(n, 3)),
        colors=rng.uniform(0.05, 0.95, size=(n, 3)),
        log_scales=rng.uniform(np.log(0.03), np.log(0.15), size=(n, 3)),
        quats=q,
        opacity_logits=rng.uniform(*logit_range, size=n),
        instance_ids=rng.integers(-1, 3, size=n) if instance_ids else np.full(n, -1),
    )


def small_intrinsics(size: int = 16) -> Intrinsics:
    return Intrinsics(size * 1.25, size * 1.25, size / 2.0, size / 2.0, size, size)


def jittered_pose(rng: np.random.Generator):
    return look_at(rng.normal(scale=0.2, size=3), [0.0, 0.0, 2.0], [0.0, 1.0, 0.0])


def desk_scene_spec(seed: int = 7, n_frames: int = 30) -> SceneSpec:
    """Three-object desk scene used by the integration fixtures."""
    return SceneSpec(
        seed=seed,
        room=(2.0, 1.4, 2.0),
        objects=[
            SceneObject("box", (0.5, 0.3, 0.4), (1.0, 0.15, 1.0), (0.55, 0.27, 0.07),
                        "table", "Asset"),
            SceneObject("box", (0.14, 0.18, 0.14), (0.9, 0.39, 0.95), (0.82, 0.12, 0.1),
                        "mug", "Ordinary"),
            SceneObject("sphere", (0.1,), (1.25, 0.4, 1.12), (0.1, 0.35, 0.85),
                        "ball", "Ordinary"),
        ],
        n_frames=n_frames,
        image_size=(48, 48),
        feature_dim=32,
    )


@pytest.fixture(scope="session")
def mapped_scene(tmp_path_factory):
    """One converged synthetic scene shared across integration tests.

    Returns (bundle, truth, map, keyframe selector, config).
    """
    out = tmp_path_factory.mktemp("scene")
    spec = desk_scene_spec()
    bundle, truth = generate_bundle(spec, out)
    cfg = PipelineConfig()
    cfg.voxel.resolution = 0.035
    cfg.optimizer.final_iters = 400
    gmap, selector = MappingPipeline(cfg).run(bundle)
    return bundle, truth, gmap, selector, cfg
