"""Densification, keyframing, the Adam loop, and pruning."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import jittered_pose, random_field, small_intrinsics
from gsmind.errors import DivergedOptimization
from gsmind.geometry import Pose, look_at
from gsmind.losses import loss_depth_grad, loss_normal_grad, loss_rgb_grad, loss_scale_grad, total_loss
from gsmind.mapstate import GaussianMap
from gsmind.observations import FrameObservation
from gsmind.optimizer import Adam, Keyframe, KeyframeSelector, OptimizerConfig, densify, optimize, prune
from gsmind.renderer import render_frame
from gsmind.splats import GaussianField, INSTANCE_NONE
from gsmind.voxelmap import VoxelMap

K = small_intrinsics(16)


def frame_at(frame_id, pose=None, size=16):
    rng = np.random.default_rng(frame_id)
    return FrameObservation(
        frame_id=frame_id,
        color=rng.random((size, size, 3)),
        depth=np.full((size, size), 1.2),
        pose=pose or Pose.identity(),
        label_image=np.zeros((size, size), dtype=np.int64),
    )


class TestDensify:
    def test_no_new_keys(self):
        gmap = GaussianMap(voxels=VoxelMap(0.05))
        assert len(densify(gmap, set(), {}, frame_at(0))) == 0

    def test_single_key_seed_values(self):
        # seed at the voxel center, identity rotation, inverse-sigmoid 0.5
        gmap = GaussianMap(voxels=VoxelMap(0.05))
        frame = frame_at(0)
        gmap.voxels.integrate_frame(frame.depth, frame.pose, K)
        key = next(iter(gmap.voxels.cells))
        seeds = {key: (8, 8)}
        cfg = OptimizerConfig()
        ids = densify(gmap, {key}, seeds, frame, cfg=cfg)
        assert len(ids) == 1
        g = gmap.gaussians
        np.testing.assert_allclose(g.centers[ids[0]], (np.array(key) + 0.5) * 0.05)
        assert g.opacity_logits[ids[0]] == 0.0  # sigmoid(0) = 0.5
        np.testing.assert_allclose(g.quats[ids[0]], [1, 0, 0, 0])
        np.testing.assert_allclose(
            g.log_scales[ids[0]], np.log(cfg.seed_scale_factor * 0.05)
        )
        np.testing.assert_allclose(g.colors[ids[0]], frame.color[8, 8])
        assert g.instance_ids[ids[0]] == INSTANCE_NONE
        assert gmap.voxels.gaussians_for([key]) == [ids[0]]

    def test_count_matches_voxelization(self):
        gmap = GaussianMap(voxels=VoxelMap(0.05))
        frame = frame_at(1)
        new_keys, seeds = gmap.voxels.integrate_frame(frame.depth, frame.pose, K)
        ids = densify(gmap, new_keys, seeds, frame)
        assert len(ids) == len(new_keys)

    def test_instance_labels_from_label_image(self):
        gmap = GaussianMap(voxels=VoxelMap(0.05))
        gmap.records[4] = __import__("gsmind.mapstate", fromlist=["InstanceRecord"]).InstanceRecord(
            id=4, feature=np.ones(4), weight=1.0
        )
        frame = frame_at(2)
        frame.label_image[:, :] = 2
        new_keys, seeds = gmap.voxels.integrate_frame(frame.depth, frame.pose, K)
        ids = densify(gmap, new_keys, seeds, frame, label_to_instance={2: 4})
        assert np.all(gmap.gaussians.instance_ids[ids] == 4)
        assert sorted(gmap.records[4].owned_gaussians) == sorted(ids.tolist())


class TestKeyframeSelection:
    def test_stride_keyframes(self):
        # indices 0..10, stationary camera -> {0, 5, 10}
        sel = KeyframeSelector(OptimizerConfig())
        taken = [f for f in range(11) if sel.offer(frame_at(f)) is not None]
        assert taken == [0, 5, 10]

    def test_translation_trigger(self):
        # a 0.2 m jump at index 3 adds it
        sel = KeyframeSelector(OptimizerConfig())
        poses = {f: Pose.identity() for f in range(5)}
        poses[3] = Pose(np.eye(3), [0.2, 0, 0])
        poses[4] = Pose(np.eye(3), [0.2, 0, 0])
        taken = [f for f in range(5) if sel.offer(frame_at(f, poses[f])) is not None]
        assert taken == [0, 3]

    def test_rotation_trigger(self):
        sel = KeyframeSelector(OptimizerConfig())
        turned = look_at([0, 0, 0], [1, 0, 1], [0, 1, 0])  # 45 degrees away
        frames = [frame_at(0), frame_at(1, turned)]
        taken = [f.frame_id for f in frames if sel.offer(f) is not None]
        assert taken == [0, 1]

    def test_no_extra_between_multiples(self):
        sel = KeyframeSelector(OptimizerConfig())
        taken = [f for f in range(10) if sel.offer(frame_at(f)) is not None]
        assert taken == [0, 5]

    def test_window_is_most_recent(self):
        cfg = OptimizerConfig()
        sel = KeyframeSelector(cfg)
        for f in range(0, 100, 5):
            sel.offer(frame_at(f))
        window = sel.window()
        assert len(window) == cfg.window_size
        assert [kf.frame_id for kf in window] == list(range(50, 100, 5))


def _map_with_field(field: GaussianField) -> GaussianMap:
    return GaussianMap(gaussians=field, voxels=VoxelMap(0.05))


class TestOptimize:
    def test_zero_iterations_bitwise_noop(self):
        rng = np.random.default_rng(0)
        gmap = _map_with_field(random_field(8, rng))
        before = gmap.gaussians.copy()
        kf = Keyframe(0, jittered_pose(rng), rng.random((16, 16, 3)), np.full((16, 16), 1.5))
        optimize(gmap, [kf], 0, K)
        for name in ("centers", "colors", "log_scales", "quats", "opacity_logits"):
            np.testing.assert_array_equal(getattr(gmap.gaussians, name), getattr(before, name))

    def test_exact_fixed_point(self):
        # target := own render -> loss 0, gradients 0, Adam steps exactly 0
        rng = np.random.default_rng(1)
        gmap = _map_with_field(random_field(6, rng))
        pose = jittered_pose(rng)
        out = render_frame(gmap.gaussians, pose, K)
        kf = Keyframe(0, pose, out.color.copy(), out.depth.copy())
        before = gmap.gaussians.copy()
        history = optimize(gmap, [kf], 25, K, prune_enabled=False)
        assert history[0] == pytest.approx(0.0, abs=1e-12)
        assert abs(history[-1] - history[0]) < 1e-6
        for name in ("centers", "colors", "log_scales", "quats", "opacity_logits"):
            np.testing.assert_array_equal(getattr(gmap.gaussians, name), getattr(before, name))

    def test_loss_decreases_on_synthetic_target(self):
        rng = np.random.default_rng(2)
        gmap = _map_with_field(random_field(10, rng))
        pose = jittered_pose(rng)
        target = render_frame(gmap.gaussians, pose, K)
        # perturb the map away from its own render, then recover
        gmap.gaussians.colors += rng.normal(scale=0.1, size=gmap.gaussians.colors.shape)
        gmap.gaussians.colors = np.clip(gmap.gaussians.colors, 0, 1)
        kf = Keyframe(0, pose, target.color, target.depth)
        history = optimize(gmap, [kf], 120, K, prune_enabled=False)
        assert history[-1] < history[0] * 0.5

    def test_statistically_nonincreasing_over_spans(self):
        rng = np.random.default_rng(3)
        gmap = _map_with_field(random_field(12, rng))
        pose = jittered_pose(rng)
        target = render_frame(gmap.gaussians, pose, K)
        gmap.gaussians.centers += rng.normal(scale=0.01, size=(12, 3))
        gmap.gaussians.colors = np.clip(
            gmap.gaussians.colors + rng.normal(scale=0.08, size=(12, 3)), 0, 1
        )
        kf = Keyframe(0, pose, target.color, target.depth)
        history = np.array(optimize(gmap, [kf], 150, K, prune_enabled=False))
        spans = history[50:] <= history[:-50] + 1e-9
        assert spans.mean() >= 0.9

    def test_total_loss_gradient_matches_fd(self):
        """Full composite loss (rgb + depth + normal + scale) end to end."""
        from gsmind.gradients import backward_from_context
        from gsmind.renderer import render_with_context

        rng = np.random.default_rng(4)
        field = random_field(5, rng)
        pose = jittered_pose(rng)
        target_c = rng.random((16, 16, 3))
        target_d = np.full((16, 16), 1.4) + rng.normal(scale=0.03, size=(16, 16))
        cfg = OptimizerConfig()

        def full_loss():
            out = render_frame(field, pose, K)
            l_rgb, _ = loss_rgb_grad(out.color, target_c, want_grad=False)
            l_dep, _ = loss_depth_grad(out.depth, target_d, want_grad=False)
            l_nrm, _ = loss_normal_grad(out.depth, target_d, K, want_grad=False)
            l_scl, _ = loss_scale_grad(field.log_scales, field.alive, want_grad=False)
            return total_loss(l_rgb, l_dep, l_nrm, l_scl)

        out, ctx = render_with_context(field, pose, K)
        _, g_color = loss_rgb_grad(out.color, target_c)
        _, g_dep = loss_depth_grad(out.depth, target_d)
        _, g_nrm = loss_normal_grad(out.depth, target_d, K)
        _, g_scl = loss_scale_grad(field.log_scales, field.alive)
        grads = backward_from_context(field, ctx, g_color, cfg.lam_depth * g_dep + cfg.lam_normal * g_nrm)
        grads.d_log_scales += cfg.lam_scale * g_scl

        step = 1e-5
        checked = 0
        for arr, ga in [
            (field.centers, grads.d_centers),
            (field.colors, grads.d_colors),
            (field.log_scales, grads.d_log_scales),
            (field.opacity_logits[:, None], grads.d_opacity_logits[:, None]),
        ]:
            flat = arr.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                if abs(gflat[i]) <= 1e-5:
                    continue
                orig = flat[i]
                flat[i] = orig + step
                plus = full_loss()
                flat[i] = orig - step
                minus = full_loss()
                flat[i] = orig
                fd = (plus - minus) / (2 * step)
                rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]))
                assert rel < 1e-3, (i, gflat[i], fd)
                checked += 1
        assert checked > 20

    def test_nan_loss_raises(self):
        rng = np.random.default_rng(5)
        gmap = _map_with_field(random_field(4, rng))
        pose = jittered_pose(rng)
        kf = Keyframe(0, pose, np.full((16, 16, 3), np.nan), np.ones((16, 16)))
        with pytest.raises(DivergedOptimization):
            optimize(gmap, [kf], 3, K, prune_enabled=False)

    def test_zero_lr_changes_nothing(self):
        rng = np.random.default_rng(6)
        gmap = _map_with_field(random_field(5, rng))
        pose = jittered_pose(rng)
        kf = Keyframe(0, pose, rng.random((16, 16, 3)), np.full((16, 16), 1.5))
        cfg = OptimizerConfig(lr_centers=0, lr_colors=0, lr_opacity=0, lr_scales=0, lr_quats=0)
        before = gmap.gaussians.copy()
        optimize(gmap, [kf], 5, K, cfg, prune_enabled=False)
        for name in ("centers", "colors", "log_scales", "opacity_logits"):
            np.testing.assert_array_equal(getattr(gmap.gaussians, name), getattr(before, name))


class TestPrune:
    def test_low_opacity_pruned(self):
        rng = np.random.default_rng(7)
        gmap = _map_with_field(random_field(5, rng))
        gmap.gaussians.opacity_logits[2] = -10.0  # sigmoid ~ 4.5e-5 < 0.005
        pruned = prune(gmap)
        assert 2 in pruned.tolist()
        assert not gmap.gaussians.alive[2]

    def test_nominal_retained(self):
        rng = np.random.default_rng(8)
        gmap = _map_with_field(random_field(5, rng))
        prune(gmap)
        assert gmap.gaussians.alive.sum() == 5

    def test_oversized_pruned(self):
        rng = np.random.default_rng(9)
        gmap = _map_with_field(random_field(4, rng))
        gmap.gaussians.log_scales[1, 0] = np.log(0.8)  # > 0.5 m
        pruned = prune(gmap)
        assert 1 in pruned.tolist()

    def test_no_dangling_ids_after_prune(self):
        rng = np.random.default_rng(10)
        field = random_field(10, rng)
        gmap = _map_with_field(field)
        from gsmind.mapstate import InstanceRecord

        gmap.records[0] = InstanceRecord(id=0, feature=np.ones(4), weight=1.0,
                                         owned_gaussians=list(range(10)))
        gmap.voxels.record_hits([(0, 0, 0)], 0)
        gmap.voxels.register_gaussians([(0, 0, 0)] * 10, list(range(10)))
        gmap.gaussians.opacity_logits[:4] = -12.0
        pruned = prune(gmap)
        assert len(pruned) == 4
        for gid in pruned:
            assert gid not in gmap.records[0].owned_gaussians
            assert gid not in gmap.voxels.gaussians_for([(0, 0, 0)])


class TestAdam:
    def test_masked_update_touches_only_index(self):
        opt = Adam((4, 3), lr=0.1)
        param = np.ones((4, 3))
        grad = np.ones((4, 3))
        opt.step(param, grad, np.array([1, 2]))
        np.testing.assert_array_equal(param[0], [1, 1, 1])
        np.testing.assert_array_equal(param[3], [1, 1, 1])
        assert np.all(param[1] < 1)
