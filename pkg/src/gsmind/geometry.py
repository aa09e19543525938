"""SE(3) poses, pinhole cameras, and single-Gaussian parameterization math.

Conventions used throughout the package:
  camera frame  +z forward, +x right, +y down (pixel v grows downward)
  poses         stored camera-to-world: x_world = R @ x_cam + t
  quaternions   (w, x, y, z), unit norm
  near plane    0.01 m; projections at or behind it are rejected
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegenerateLookAt, InvalidRotation, SingularCovariance

NEAR_PLANE = 0.01
ORTHONORMAL_TOL = 1e-9
QUAT_TOL = 1e-6


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise InvalidRotation("non-finite pose")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise InvalidRotation("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvalidRotation("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def perturbed(self, trans: np.ndarray, rot: np.ndarray) -> "Pose":
        """Right-multiplied camera-frame perturbation.

        New pose: R' = R @ exp(skew(rot)), t' = t + R @ trans. This is the
        tangent convention used by pose gradients and refinement steps.
        """
        R = self.rotation @ rotation_exp(np.asarray(rot, dtype=np.float64))
        t = self.translation + self.rotation @ np.asarray(trans, dtype=np.float64)
        return Pose(R, t)

    # 16 whitespace-separated numbers, 4x4 row-major camera-to-world
    def to_text(self) -> str:
        return " ".join(repr(float(v)) for v in self.matrix().reshape(-1))

    @classmethod
    def from_text(cls, text: str) -> "Pose":
        vals = [float(v) for v in text.split()]
        if len(vals) != 16:
            raise InvalidRotation(f"pose text has {len(vals)} numbers, expected 16")
        return cls.from_matrix(np.array(vals).reshape(4, 4))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def widened(self, factor: float) -> "Intrinsics":
        """Scale the field of view up by `factor` (shrinks focal lengths)."""
        return Intrinsics(
            self.fx / factor, self.fy / factor, self.cx, self.cy, self.width, self.height
        )


@dataclass
class GaussianSplat:
    """One anisotropic 3D Gaussian primitive.

    Covariance is derived: Sigma = R(q) @ diag(exp(2 s)) @ R(q)^T, opacity is
    sigmoid(opacity_logit), color is the view-independent zero-order term.
    """

    center: np.ndarray
    color: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    opacity_logit: float
    instance_id: int | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.opacity_logit = float(self.opacity_logit)

    @property
    def opacity(self) -> float:
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    def covariance(self) -> np.ndarray:
        return compose_covariance(self.log_scale, self.rotation)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of an axis-angle 3-vector."""
    theta = float(np.linalg.norm(omega))
    K = np.array(
        [
            [0.0, -omega[2], omega[1]],
            [omega[2], 0.0, -omega[0]],
            [-omega[1], omega[0], 0.0],
        ]
    )
    if theta < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * (K @ K)


def compose_covariance(log_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(2 s)) R^T for a unit quaternion rotation."""
    q = np.asarray(rotation, dtype=np.float64).reshape(4)
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > QUAT_TOL:
        raise InvalidRotation(f"quaternion norm {norm:.8f} deviates from 1")
    s = np.asarray(log_scale, dtype=np.float64).reshape(3)
    R = quat_to_rotation(q / norm)
    cov = (R * np.exp(2.0 * s)) @ R.T
    return 0.5 * (cov + cov.T)


def density_at(g: GaussianSplat, x: np.ndarray) -> float:
    """Unnormalized density exp(-0.5 (x-u)^T Sigma^-1 (x-u)); 1 at the center."""
    cov = g.covariance()
    d = np.asarray(x, dtype=np.float64).reshape(3) - g.center
    try:
        sol = np.linalg.solve(cov, d)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(str(exc)) from exc
    if not np.all(np.isfinite(sol)):
        raise SingularCovariance("covariance solve produced non-finite values")
    return float(np.exp(-0.5 * d @ sol))


def pinhole_jacobian(p_cam: np.ndarray, K: Intrinsics) -> np.ndarray:
    """First-order Jacobian of the pinhole projection at a camera-space point."""
    x, y, z = p_cam
    return np.array(
        [
            [K.fx / z, 0.0, -K.fx * x / z**2],
            [0.0, K.fy / z, -K.fy * y / z**2],
        ]
    )


def project_point(p: np.ndarray, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Pinhole projection of a world point to pixel coordinates."""
    p_cam = pose.world_to_camera(np.asarray(p, dtype=np.float64).reshape(3))
    if p_cam[2] <= NEAR_PLANE:
        raise BehindCamera(f"point at camera depth {p_cam[2]:.4f} m")
    return np.array(
        [K.fx * p_cam[0] / p_cam[2] + K.cx, K.fy * p_cam[1] / p_cam[2] + K.cy]
    )


def project_gaussian(
    g: GaussianSplat, pose: Pose, K: Intrinsics
) -> tuple[np.ndarray, np.ndarray, float]:
    """Project a Gaussian: (pixel mean, 2x2 pixel covariance, camera depth).

    cov2d = J (R^T Sigma R) J^T where R is the camera-to-world rotation and J
    the pinhole Jacobian at the transformed center.
    """
    p_cam = pose.world_to_camera(g.center)
    if p_cam[2] <= NEAR_PLANE:
        raise BehindCamera(f"gaussian at camera depth {p_cam[2]:.4f} m")
    mean2d = np.array(
        [K.fx * p_cam[0] / p_cam[2] + K.cx, K.fy * p_cam[1] / p_cam[2] + K.cy]
    )
    J = pinhole_jacobian(p_cam, K)
    cov_cam = pose.rotation.T @ g.covariance() @ pose.rotation
    cov2d = J @ cov_cam @ J.T
    return mean2d, 0.5 * (cov2d + cov2d.T), float(p_cam[2])


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> Pose:
    """Camera-to-world pose with +z camera axis pointing from eye to target."""
    eye = np.asarray(eye, dtype=np.float64).reshape(3)
    target = np.asarray(target, dtype=np.float64).reshape(3)
    up = np.asarray(up, dtype=np.float64).reshape(3)
    forward = target - eye
    dist = np.linalg.norm(forward)
    if dist <= 1e-6:
        raise DegenerateLookAt("eye and target coincide")
    forward = forward / dist
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm <= 1e-6:
        raise DegenerateLookAt("up vector parallel to the view direction")
    right = right / norm
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=1)
    return Pose(R, eye)
