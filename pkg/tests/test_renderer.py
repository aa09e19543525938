"""Splat renderer against the exhaustive oracle, plus the mask utilities."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import jittered_pose, random_field, small_intrinsics
from gsmind.errors import ShapeMismatch, UnknownInstance
from gsmind.geometry import GaussianSplat, Intrinsics, Pose, look_at
from gsmind.renderer import (
    RenderOutput,
    depth_to_normals,
    oracle_render,
    render_frame,
    render_instance_mask,
    silhouette_mask,
)
from gsmind.splats import GaussianField, INSTANCE_NONE

K = small_intrinsics(16)


def assert_outputs_close(a: RenderOutput, b: RenderOutput, tol=1e-5):
    np.testing.assert_allclose(a.color, b.color, atol=tol)
    np.testing.assert_allclose(a.depth, b.depth, atol=tol)
    np.testing.assert_allclose(a.alpha_accum, b.alpha_accum, atol=tol)
    np.testing.assert_array_equal(a.instance_map, b.instance_map)


class TestRenderFrame:
    def test_empty_input_is_background(self):
        out = render_frame(GaussianField.empty(), Pose.identity(), K)
        assert not out.color.any()
        assert not out.depth.any()
        assert not out.alpha_accum.any()
        assert np.all(out.instance_map == INSTANCE_NONE)

    def test_single_opaque_gaussian(self):
        # opacity logit far on the positive side, huge footprint, centered
        g = GaussianSplat(
            center=[0, 0, 2.0], color=[0.9, 0.2, 0.1], log_scale=np.log([0.5, 0.5, 0.5]),
            rotation=[1, 0, 0, 0], opacity_logit=20.0, instance_id=4,
        )
        out = render_frame([g], Pose.identity(), K)
        v, u = int(K.cy), int(K.cx)
        np.testing.assert_allclose(out.color[v, u], [0.9, 0.2, 0.1], atol=1e-2)
        assert out.depth[v, u] == pytest.approx(2.0, abs=1e-6)
        assert out.instance_map[v, u] == 4

    def test_matches_oracle_on_random_scenes(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            field = random_field(int(rng.integers(1, 21)), rng)
            pose = jittered_pose(rng)
            assert_outputs_close(render_frame(field, pose, K), oracle_render(field, pose, K))

    def test_order_independence(self):
        rng = np.random.default_rng(1)
        field = random_field(15, rng)
        pose = jittered_pose(rng)
        ref = render_frame(field, pose, K)
        perm = rng.permutation(15)
        shuffled = GaussianField.from_arrays(
            field.centers[perm], field.colors[perm], field.log_scales[perm],
            field.quats[perm], field.opacity_logits[perm], field.instance_ids[perm],
        )
        out = render_frame(shuffled, pose, K)
        np.testing.assert_allclose(out.color, ref.color, atol=1e-12)
        np.testing.assert_allclose(out.depth, ref.depth, atol=1e-12)

    def test_oracle_permutation_invariance(self):
        rng = np.random.default_rng(2)
        field = random_field(10, rng)
        pose = jittered_pose(rng)
        ref = oracle_render(field, pose, K)
        perm = rng.permutation(10)
        shuffled = GaussianField.from_arrays(
            field.centers[perm], field.colors[perm], field.log_scales[perm],
            field.quats[perm], field.opacity_logits[perm], field.instance_ids[perm],
        )
        assert_outputs_close(oracle_render(shuffled, pose, K), ref, tol=1e-12)

    def test_alpha_monotone_in_opacity(self):
        rng = np.random.default_rng(3)
        field = random_field(8, rng)
        pose = jittered_pose(rng)
        base = render_frame(field, pose, K).alpha_accum
        bumped = field.copy()
        bumped.opacity_logits[3] += 0.7
        after = render_frame(bumped, pose, K).alpha_accum
        assert np.all(after >= base - 1e-12)

    def test_numpy_path_matches_kernel_path(self, monkeypatch):
        pytest.importorskip("numba")
        rng = np.random.default_rng(4)
        field = random_field(25, rng)
        pose = jittered_pose(rng)
        fast = render_frame(field, pose, K)
        monkeypatch.setenv("GSMIND_NO_NUMBA", "1")
        slow = render_frame(field, pose, K)
        assert_outputs_close(fast, slow, tol=1e-12)


class TestInstanceMask:
    def test_requires_known_instance(self):
        rng = np.random.default_rng(5)
        field = random_field(5, rng)
        field.instance_ids[:] = 0
        with pytest.raises(UnknownInstance):
            render_instance_mask(field, 99, Pose.identity(), K)

    def test_single_wide_gaussian_covers_center(self):
        g = GaussianSplat(
            center=[0, 0, 2.0], color=[1, 1, 1], log_scale=np.log([0.4, 0.4, 0.4]),
            rotation=[1, 0, 0, 0], opacity_logit=20.0, instance_id=1,
        )
        mask = render_instance_mask(GaussianField.from_splats([g]), 1, Pose.identity(), K)
        assert mask[int(K.cy), int(K.cx)]

    def test_only_target_instance_rendered(self):
        rng = np.random.default_rng(6)
        field = random_field(12, rng)
        field.instance_ids[:6] = 1
        field.instance_ids[6:] = 2
        pose = jittered_pose(rng)
        m1 = render_instance_mask(field, 1, pose, K)
        sub = field.copy()
        sub.alive = field.instance_ids == 1
        expected = render_frame(sub, pose, K).alpha_accum >= 0.5
        np.testing.assert_array_equal(m1, expected)


class TestSilhouetteMask:
    def _out(self, alpha):
        H, W = 4, 4
        return RenderOutput(
            color=np.zeros((H, W, 3)),
            depth=np.ones((H, W)),
            alpha_accum=np.full((H, W), alpha),
            instance_map=np.full((H, W), INSTANCE_NONE),
        )

    def test_above_threshold_included(self):
        # lambda8 = 0.98: alpha 0.99 with both depths valid -> in mask
        assert silhouette_mask(self._out(0.99), np.ones((4, 4))).all()

    def test_below_threshold_excluded(self):
        assert not silhouette_mask(self._out(0.5), np.ones((4, 4))).any()

    def test_invalid_observed_depth_excluded(self):
        obs = np.ones((4, 4))
        obs[1, 2] = 0.0
        mask = silhouette_mask(self._out(0.99), obs)
        assert not mask[1, 2]
        assert mask.sum() == 15

    def test_threshold_boundary_strict(self):
        # the gate is alpha > 0.98, exactly 0.98 stays out
        assert not silhouette_mask(self._out(0.98), np.ones((4, 4))).any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            silhouette_mask(self._out(0.99), np.ones((5, 4)))


class TestDepthToNormals:
    def test_frontoparallel_plane(self):
        depth = np.full((12, 12), 2.0)
        normals = depth_to_normals(depth, small_intrinsics(12))
        interior = normals[2:-2, 2:-2]
        np.testing.assert_allclose(interior, np.broadcast_to([0, 0, -1.0], interior.shape), atol=1e-9)

    def test_zero_depth_region(self):
        depth = np.zeros((8, 8))
        assert not depth_to_normals(depth, small_intrinsics(8)).any()

    def test_hole_neighbors_zeroed(self):
        depth = np.full((8, 8), 1.5)
        depth[4, 4] = 0.0
        normals = depth_to_normals(depth, small_intrinsics(8))
        assert not normals[4, 4].any()
        assert not normals[4, 3].any() and not normals[3, 4].any()

    def test_ramp_matches_analytic_plane(self):
        # camera-space plane z = 1 + 0.5 x: tangents (1,0,0.5) and (0,1,0),
        # cross(ty, tx) gives the camera-facing normal (0.5, 0, -1)/|.|
        Ks = small_intrinsics(24)
        us = np.arange(24, dtype=float)
        ray_x = (us[None, :] - Ks.cx) / Ks.fx
        depth = 1.0 / (1.0 - 0.5 * np.broadcast_to(ray_x, (24, 24)))
        normals = depth_to_normals(depth, Ks)
        expected = np.array([0.5, 0.0, -1.0])
        expected /= np.linalg.norm(expected)
        inner = normals[8:-8, 8:-8].reshape(-1, 3)
        angles = np.degrees(np.arccos(np.clip(inner @ expected, -1, 1)))
        assert angles.max() < 1.0
