"""Geometry core: poses, projection, covariance composition, look-at.

Expected values are hand-computed; the random cases check against
independent dense-matrix oracles.
"""

from __future__ import annotations

import numpy as np
import pytest

from gsmind.errors import BehindCamera, DegenerateLookAt, InvalidRotation, SingularCovariance
from gsmind.geometry import (
    GaussianSplat,
    Intrinsics,
    Pose,
    compose_covariance,
    density_at,
    look_at,
    pinhole_jacobian,
    project_gaussian,
    project_point,
    quat_to_rotation,
    rotation_exp,
)


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def splat(center=(0, 0, 2), log_scale=(0, 0, 0), quat=(1, 0, 0, 0), logit=0.0):
    return GaussianSplat(
        center=np.array(center, dtype=float),
        color=np.array([0.5, 0.5, 0.5]),
        log_scale=np.array(log_scale, dtype=float),
        rotation=np.array(quat, dtype=float),
        opacity_logit=logit,
    )


K100 = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


class TestPose:
    def test_identity_roundtrip(self):
        p = Pose.identity()
        np.testing.assert_allclose(p.matrix(), np.eye(4))

    def test_orthonormality_enforced(self):
        with pytest.raises(InvalidRotation):
            Pose(np.eye(3) * 2.0, np.zeros(3))

    def test_world_camera_inverse(self):
        rng = np.random.default_rng(3)
        p = look_at(rng.normal(size=3), rng.normal(size=3) + 5.0, [0, 1, 0])
        pts = rng.normal(size=(10, 3))
        np.testing.assert_allclose(p.camera_to_world(p.world_to_camera(pts)), pts, atol=1e-12)

    def test_text_roundtrip(self):
        rng = np.random.default_rng(5)
        p = look_at(rng.normal(size=3), rng.normal(size=3) + 4.0, [0, 1, 0])
        q = Pose.from_text(p.to_text())
        np.testing.assert_array_equal(q.matrix(), p.matrix())

    def test_text_wrong_count(self):
        with pytest.raises(InvalidRotation):
            Pose.from_text("1 2 3")

    def test_perturbed_identity(self):
        p = Pose.identity().perturbed([0.1, 0, 0], [0, 0, 0])
        np.testing.assert_allclose(p.translation, [0.1, 0, 0])

    def test_rotation_exp_small_angle(self):
        R = rotation_exp(np.array([0, 0, 1e-14]))
        np.testing.assert_allclose(R, np.eye(3), atol=1e-13)


class TestComposeCovariance:
    def test_identity_case(self):
        # s = (0,0,0), q = identity -> identity matrix
        np.testing.assert_allclose(
            compose_covariance(np.zeros(3), [1, 0, 0, 0]), np.eye(3), atol=1e-15
        )

    def test_axis_aligned_scaling(self):
        # s = (ln 2, 0, 0) -> diag(4, 1, 1)
        cov = compose_covariance([np.log(2.0), 0.0, 0.0], [1, 0, 0, 0])
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = rng.uniform(-2, 1, size=3)
            q = random_unit_quat(rng)
            R = quat_to_rotation(q)
            oracle = R @ np.diag(np.exp(2 * s)) @ R.T
            np.testing.assert_allclose(compose_covariance(s, q), oracle, atol=1e-12)

    def test_non_unit_quaternion_rejected(self):
        with pytest.raises(InvalidRotation):
            compose_covariance(np.zeros(3), [1.0, 0.1, 0.0, 0.0])

    def test_eigenvalue_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            s = rng.uniform(-2, 1, size=3)
            q = random_unit_quat(rng)
            eig = np.linalg.eigvalsh(compose_covariance(s, q))
            assert eig.min() >= np.exp(2 * s).min() - 1e-9
            assert eig.max() <= np.exp(2 * s).max() + 1e-9


class TestDensityAt:
    def test_center_is_one(self):
        g = splat()
        assert density_at(g, g.center) == pytest.approx(1.0)

    def test_unit_mahalanobis(self):
        # Sigma = I, |x - u| = 1 -> exp(-0.5)
        g = splat()
        assert density_at(g, g.center + [1, 0, 0]) == pytest.approx(np.exp(-0.5), abs=1e-12)

    def test_matches_solve_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            g = splat(
                center=rng.normal(size=3),
                log_scale=rng.uniform(-1, 0.5, size=3),
                quat=random_unit_quat(rng),
            )
            x = rng.normal(size=3)
            cov = g.covariance()
            d = x - g.center
            oracle = np.exp(-0.5 * d @ np.linalg.inv(cov) @ d)
            assert density_at(g, x) == pytest.approx(oracle, abs=1e-12)

    def test_singular_covariance(self):
        g = splat(log_scale=(-400.0, 0.0, 0.0))
        with pytest.raises(SingularCovariance):
            density_at(g, np.array([1.0, 1.0, 3.0]))


class TestProjectGaussian:
    def test_on_axis_point(self):
        # camera-space (0,0,2), fx=fy=100, cx=cy=50 -> (50,50), d=2
        mean2d, _, depth = project_gaussian(splat(), Pose.identity(), K100)
        np.testing.assert_allclose(mean2d, [50.0, 50.0])
        assert depth == pytest.approx(2.0)

    def test_cov2d_hand_evaluated(self):
        # Sigma = I at z=2: J = [[50,0,0],[0,50,0]] -> J J^T = diag(2500, 2500)
        _, cov2d, _ = project_gaussian(splat(), Pose.identity(), K100)
        np.testing.assert_allclose(cov2d, np.diag([2500.0, 2500.0]), atol=1e-9)

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            project_gaussian(splat(center=(0, 0, -1)), Pose.identity(), K100)

    def test_matches_numeric_jacobian_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            pose = look_at(rng.normal(scale=0.3, size=3), [0, 0, 2.5], [0, 1, 0])
            g = splat(
                center=rng.uniform([-0.4, -0.4, 1.5], [0.4, 0.4, 3.0]),
                log_scale=rng.uniform(-2.5, -1.0, size=3),
                quat=random_unit_quat(rng),
            )
            mean2d, cov2d, _ = project_gaussian(g, pose, K100)

            def proj(x):
                p = pose.world_to_camera(x)
                return np.array([100 * p[0] / p[2] + 50, 100 * p[1] / p[2] + 50])

            # central-difference Jacobian of the world-to-pixel map; it
            # absorbs the world-to-camera rotation, so it contracts the
            # world covariance directly
            h = 1e-5
            J = np.zeros((2, 3))
            for k in range(3):
                e = np.zeros(3)
                e[k] = h
                J[:, k] = (proj(g.center + e) - proj(g.center - e)) / (2 * h)
            oracle = J @ g.covariance() @ J.T
            np.testing.assert_allclose(cov2d, oracle, rtol=1e-4)

    def test_cov2d_symmetric_psd(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            pose = jitter = look_at(rng.normal(scale=0.2, size=3), [0, 0, 2], [0, 1, 0])
            g = splat(center=rng.uniform([-0.3, -0.3, 1.2], [0.3, 0.3, 2.8]),
                      log_scale=rng.uniform(-2, 0, size=3), quat=random_unit_quat(rng))
            _, cov2d, _ = project_gaussian(g, pose, K100)
            assert np.max(np.abs(cov2d - cov2d.T)) < 1e-12
            assert np.all(np.linalg.eigvalsh(cov2d) >= -1e-9)


class TestProjectPoint:
    def test_principal_point(self):
        np.testing.assert_allclose(
            project_point([0, 0, 1], Pose.identity(), K100), [50.0, 50.0]
        )

    def test_linear_pinhole(self):
        # p = (0.5, 0, 1), fx = 100, cx = 50 -> (100, 50)
        np.testing.assert_allclose(
            project_point([0.5, 0, 1], Pose.identity(), K100), [100.0, 50.0]
        )

    def test_matches_homogeneous_oracle(self):
        rng = np.random.default_rng(8)
        Kmat = K100.matrix()
        for _ in range(30):
            pose = look_at(rng.normal(scale=0.3, size=3), [0, 0, 2.5], [0, 1, 0])
            p = rng.uniform([-0.5, -0.5, 1.5], [0.5, 0.5, 3.0])
            hom = Kmat @ np.linalg.inv(pose.matrix())[:3] @ np.append(p, 1.0)
            oracle = hom[:2] / hom[2]
            np.testing.assert_allclose(project_point(p, pose, K100), oracle, atol=1e-9)

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            project_point([0, 0, -2], Pose.identity(), K100)


class TestLookAt:
    def test_canonical_frame(self):
        # +z-forward convention: forward axis = (0, 0, 1)
        p = look_at([0, 0, 0], [0, 0, 1], [0, 1, 0])
        np.testing.assert_allclose(p.rotation[:, 2], [0, 0, 1], atol=1e-12)
        np.testing.assert_allclose(p.rotation.T @ p.rotation, np.eye(3), atol=1e-12)

    def test_degenerate_direction(self):
        with pytest.raises(DegenerateLookAt):
            look_at([1, 2, 3], [1, 2, 3], [0, 1, 0])

    def test_parallel_up(self):
        with pytest.raises(DegenerateLookAt):
            look_at([0, 0, 0], [0, 0, 1], [0, 0, 1])

    def test_forward_and_orthonormality_property(self):
        rng = np.random.default_rng(9)
        for _ in range(40):
            eye = rng.normal(size=3)
            target = eye + rng.normal(size=3) * 2 + [0, 0, 3]
            p = look_at(eye, target, [0, 1, 0])
            fwd = (target - eye) / np.linalg.norm(target - eye)
            np.testing.assert_allclose(p.rotation[:, 2], fwd, atol=1e-9)
            np.testing.assert_allclose(p.rotation.T @ p.rotation, np.eye(3), atol=1e-9)
            assert np.linalg.det(p.rotation) == pytest.approx(1.0, abs=1e-9)

    def test_target_projects_to_principal_point(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            eye = rng.normal(size=3)
            target = eye + rng.normal(size=3) + [0, 0, 2.5]
            pose = look_at(eye, target, [0, 1, 0])
            px = project_point(target, pose, K100)
            np.testing.assert_allclose(px, [50.0, 50.0], atol=1e-6)


def test_pinhole_jacobian_entries():
    J = pinhole_jacobian(np.array([0.4, -0.2, 2.0]), K100)
    np.testing.assert_allclose(
        J, [[50.0, 0.0, -100 * 0.4 / 4.0], [0.0, 50.0, 100 * 0.2 / 4.0]]
    )
