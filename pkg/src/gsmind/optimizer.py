"""Voxel-guided densification, keyframing, joint optimization, pruning.

New Gaussians are seeded one per newly observed voxel at the voxel center,
colored from the observed pixel, opacity 0.5 through the inverse sigmoid,
isotropic sub-voxel scale. Optimization is Adam with per-group learning
rates cycling keyframes round-robin against the combined photometric /
depth / normal / scale loss. All parameter updates (including quaternion
renormalization and Adam state) touch only the trainable index set, so
frozen Gaussians remain bitwise unchanged during masked refinement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import DivergedOptimization
from .geometry import Intrinsics, Pose
from .gradients import backward_from_context
from .losses import (
    LAMBDA_DEPTH,
    LAMBDA_NORMAL,
    LAMBDA_RGB_SSIM,
    LAMBDA_SCALE,
    R_ALLOW,
    loss_depth_grad,
    loss_normal_grad,
    loss_rgb_grad,
    loss_scale_grad,
    total_loss,
)
from .mapstate import GaussianMap
from .observations import FrameObservation
from .renderer import render_with_context
from .splats import INSTANCE_NONE, GaussianField

logger = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    # loss weights (lambda4..lambda7) and scale hinge
    lam_rgb_ssim: float = LAMBDA_RGB_SSIM
    lam_depth: float = LAMBDA_DEPTH
    lam_normal: float = LAMBDA_NORMAL
    lam_scale: float = LAMBDA_SCALE
    r_allow: float = R_ALLOW
    # keyframing (delta_n, delta_m plus motion triggers)
    keyframe_stride: int = 5
    window_size: int = 10
    keyframe_trans: float = 0.15  # m
    keyframe_rot_deg: float = 15.0
    # learning rates; centers are additionally scaled by scene extent and
    # decay exponentially to lr_center_final_frac over an optimize() run
    lr_centers: float = 1.6e-4
    lr_center_final_frac: float = 0.1
    lr_colors: float = 2.5e-3
    lr_opacity: float = 1e-1
    lr_scales: float = 1e-2
    lr_quats: float = 1e-3
    # pruning
    prune_opacity: float = 0.005
    prune_scale: float = 0.5  # m
    prune_every: int = 100
    # densification seed: s0 = ln(seed_scale_factor * voxel resolution)
    seed_scale_factor: float = 0.5
    # mapping schedule
    iters_per_keyframe: int = 20
    final_iters: int = 500


@dataclass
class Keyframe:
    frame_id: int
    pose: Pose
    color: np.ndarray
    depth: np.ndarray


class KeyframeSelector:
    """Keyframe every `stride` frames or on sufficient camera motion."""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.keyframes: list[Keyframe] = []
        self._last_pose: Pose | None = None

    def offer(self, frame: FrameObservation) -> Keyframe | None:
        take = frame.frame_id % self.cfg.keyframe_stride == 0
        if not take and self._last_pose is not None:
            trans = float(np.linalg.norm(frame.pose.translation - self._last_pose.translation))
            rel = self._last_pose.rotation.T @ frame.pose.rotation
            angle = np.degrees(np.arccos(np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)))
            take = trans > self.cfg.keyframe_trans or angle > self.cfg.keyframe_rot_deg
        if not take:
            return None
        kf = Keyframe(frame.frame_id, frame.pose, frame.color.copy(), frame.depth.copy())
        self.keyframes.append(kf)
        self._last_pose = frame.pose
        return kf

    def window(self) -> list[Keyframe]:
        return self.keyframes[-self.cfg.window_size:]


def densify(gmap: GaussianMap, new_keys, seed_pixels: dict, frame: FrameObservation,
            label_to_instance: dict | None = None,
            instance_id: int | None = None,
            cfg: OptimizerConfig | None = None) -> np.ndarray:
    """One Gaussian per newly observed voxel, seeded from the frame.

    Instance ids come from the frame's label image through
    `label_to_instance`, or are forced to `instance_id` when given. Returns
    the new Gaussian ids, already registered in the voxel index and the
    owning records.
    """
    cfg = cfg or OptimizerConfig()
    keys = sorted(new_keys)
    if not keys:
        return np.zeros(0, dtype=np.int64)
    res = gmap.voxels.resolution
    centers = (np.array(keys, dtype=np.float64) + 0.5) * res
    n = len(keys)

    colors = np.zeros((n, 3))
    inst = np.full(n, INSTANCE_NONE, dtype=np.int64)
    for i, key in enumerate(keys):
        r, c = seed_pixels[key]
        colors[i] = frame.color[r, c]
        if instance_id is not None:
            inst[i] = instance_id
        elif label_to_instance is not None and frame.label_image is not None:
            inst[i] = label_to_instance.get(int(frame.label_image[r, c]), INSTANCE_NONE)

    chunk = GaussianField.from_arrays(
        centers=centers,
        colors=colors,
        log_scales=np.full((n, 3), np.log(cfg.seed_scale_factor * res)),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.zeros(n),  # sigmoid(0) = 0.5
        instance_ids=inst,
    )
    ids = gmap.gaussians.append(chunk)
    gmap.voxels.register_gaussians(keys, ids)
    for gid, iid in zip(ids.tolist(), inst.tolist()):
        if iid != INSTANCE_NONE and iid in gmap.records:
            gmap.records[iid].owned_gaussians.append(gid)
    return ids


class Adam:
    """Per-array Adam with masked (trainable-only) updates."""

    def __init__(self, shape, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray, idx: np.ndarray) -> None:
        self.t += 1
        g = grad[idx]
        self.m[idx] = self.beta1 * self.m[idx] + (1 - self.beta1) * g
        self.v[idx] = self.beta2 * self.v[idx] + (1 - self.beta2) * g * g
        m_hat = self.m[idx] / (1 - self.beta1**self.t)
        v_hat = self.v[idx] / (1 - self.beta2**self.t)
        param[idx] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def scene_extent(field: GaussianField) -> float:
    alive = field.alive
    if not np.any(alive):
        return 1.0
    c = field.centers[alive]
    return max(float(np.max(c.max(axis=0) - c.min(axis=0))), 1.0)


def optimize(gmap: GaussianMap, keyframes, iters: int, K: Intrinsics,
             cfg: OptimizerConfig | None = None,
             trainable: np.ndarray | None = None,
             prune_enabled: bool = True) -> list[float]:
    """Adam over all Gaussian parameter groups, keyframes round-robin.

    Returns the per-iteration total-loss history. Raises
    DivergedOptimization on a non-finite loss.
    """
    cfg = cfg or OptimizerConfig()
    keyframes = list(keyframes)
    if iters <= 0 or not keyframes:
        return []
    f = gmap.gaussians
    if trainable is None:
        trainable = np.flatnonzero(f.alive)
    trainable = np.asarray(trainable, dtype=np.int64)
    if len(trainable) == 0:
        return []

    base_center_lr = cfg.lr_centers * scene_extent(f)
    opt_centers = Adam(f.centers.shape, base_center_lr)
    opt_colors = Adam(f.colors.shape, cfg.lr_colors)
    opt_scales = Adam(f.log_scales.shape, cfg.lr_scales)
    opt_quats = Adam(f.quats.shape, cfg.lr_quats)
    opt_logits = Adam(f.opacity_logits.shape, cfg.lr_opacity)

    history: list[float] = []
    for it in range(iters):
        kf = keyframes[it % len(keyframes)]
        out, ctx = render_with_context(f, kf.pose, K)
        l_rgb, g_color = loss_rgb_grad(out.color, kf.color, cfg.lam_rgb_ssim)
        l_dep, g_dep = loss_depth_grad(out.depth, kf.depth)
        l_nrm, g_nrm = loss_normal_grad(out.depth, kf.depth, K)
        l_scl, g_scl = loss_scale_grad(f.log_scales, f.alive, cfg.r_allow)
        loss = total_loss(l_rgb, l_dep, l_nrm, l_scl,
                          cfg.lam_depth, cfg.lam_normal, cfg.lam_scale)
        if not np.isfinite(loss):
            raise DivergedOptimization(f"loss became {loss} at iteration {it}")
        history.append(loss)

        g_depth_total = cfg.lam_depth * g_dep + cfg.lam_normal * g_nrm
        grads = backward_from_context(f, ctx, g_color, g_depth_total)
        grads.d_log_scales += cfg.lam_scale * g_scl
        # dead-band: float dust below any real signal must not drive Adam's
        # normalized steps, or a converged map drifts at full learning rate
        for arr in (grads.d_centers, grads.d_colors, grads.d_log_scales,
                    grads.d_quats, grads.d_opacity_logits):
            np.copyto(arr, 0.0, where=np.abs(arr) < 1e-12)

        if iters > 1:
            opt_centers.lr = base_center_lr * cfg.lr_center_final_frac ** (it / (iters - 1))
        opt_centers.step(f.centers, grads.d_centers, trainable)
        opt_colors.step(f.colors, grads.d_colors, trainable)
        opt_scales.step(f.log_scales, grads.d_log_scales, trainable)
        opt_quats.step(f.quats, grads.d_quats, trainable)
        opt_logits.step(f.opacity_logits, grads.d_opacity_logits, trainable)
        moved = trainable[np.any(grads.d_quats[trainable] != 0.0, axis=1)]
        f.quats[moved] /= np.linalg.norm(f.quats[moved], axis=1, keepdims=True)
        f.colors[trainable] = np.clip(f.colors[trainable], 0.0, 1.0)

        if prune_enabled and cfg.prune_every > 0 and (it + 1) % cfg.prune_every == 0:
            prune(gmap, cfg)
    return history


def prune(gmap: GaussianMap, cfg: OptimizerConfig | None = None) -> np.ndarray:
    """Kill Gaussians with near-zero opacity or oversized extent.

    The voxel index and instance ownership lists are purged of the removed
    ids. Returns the pruned Gaussian ids.
    """
    cfg = cfg or OptimizerConfig()
    f = gmap.gaussians
    opacity = f.opacities()
    max_scale = np.exp(f.log_scales).max(axis=1)
    doomed = f.alive & ((opacity < cfg.prune_opacity) | (max_scale > cfg.prune_scale))
    ids = np.flatnonzero(doomed)
    if len(ids) == 0:
        return ids
    f.kill(ids)
    gmap.voxels.drop_gaussians(ids)
    dead = set(ids.tolist())
    for rec in gmap.records.values():
        if any(g in dead for g in rec.owned_gaussians):
            rec.owned_gaussians = [g for g in rec.owned_gaussians if g not in dead]
    logger.debug("pruned %d gaussians", len(ids))
    return ids
