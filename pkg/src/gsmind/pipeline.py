"""Incremental mapping: integrate, associate, densify, optimize per frame."""

from __future__ import annotations

import logging

import numpy as np

from .config import PipelineConfig
from .instances import InstanceEngine
from .mapstate import GaussianMap
from .optimizer import KeyframeSelector, densify, optimize
from .splats import INSTANCE_NONE
from .voxelmap import VoxelMap

logger = logging.getLogger(__name__)


class MappingPipeline:
    """Builds a GaussianMap from a bundle of posed RGB-D frames."""

    def __init__(self, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()

    def run(self, bundle, final_optimize: bool = True):
        """Returns (map, keyframe selector) after processing every frame."""
        cfg = self.config
        K = bundle.intrinsics
        gmap = GaussianMap(
            voxels=VoxelMap(cfg.voxel.resolution, cfg.voxel.max_depth),
            feature_dim=bundle.meta.feature_dim,
        )
        engine = InstanceEngine(
            gmap, K, tau=cfg.association.tau,
            weights=(cfg.association.lam_geo, cfg.association.lam_iou, cfg.association.lam_sem),
            min_area=cfg.association.min_obs_area,
            block_border_spawns=cfg.association.block_border_spawns,
        )
        selector = KeyframeSelector(cfg.optimizer)

        for frame in bundle.frames():
            new_keys, seeds = gmap.voxels.integrate_frame(frame.depth, frame.pose, K)
            outcomes = engine.process_frame(frame)
            label_to_instance = {}
            for obs, outcome in zip(frame.observations, outcomes):
                if outcome is not None and outcome.instance_id >= 0 and obs.label is not None:
                    label_to_instance[obs.label] = outcome.instance_id
            densify(gmap, new_keys, seeds, frame, label_to_instance, cfg=cfg.optimizer)

            kf = selector.offer(frame)
            if kf is not None and gmap.gaussians.n_alive and cfg.optimizer.iters_per_keyframe > 0:
                optimize(gmap, selector.window(), cfg.optimizer.iters_per_keyframe,
                         K, cfg.optimizer)
            logger.debug(
                "frame %d: %d new voxels, %d instances, %d gaussians",
                frame.frame_id, len(new_keys), len(gmap.records), gmap.gaussians.n_alive,
            )

        if final_optimize and selector.keyframes and cfg.optimizer.final_iters > 0:
            # the recency window drives incremental steps; the final joint
            # polish covers the whole trajectory
            optimize(gmap, selector.keyframes, cfg.optimizer.final_iters, K, cfg.optimizer)
        logger.info(
            "mapping done: %d instances, %d gaussians, %d keyframes",
            len(gmap.records), gmap.gaussians.n_alive, len(selector.keyframes),
        )
        return gmap, selector
