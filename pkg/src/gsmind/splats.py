"""Struct-of-arrays storage for Gaussian primitives.

The renderer and optimizer work on contiguous float64 arrays; the
per-primitive :class:`~gsmind.geometry.GaussianSplat` value type is only a
convenience view. Deleted primitives are tombstoned via ``alive`` so Gaussian
ids stay stable for the voxel index and instance ownership.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GaussianSplat

INSTANCE_NONE = -1


@dataclass
class GaussianField:
    centers: np.ndarray  # (N, 3) m
    colors: np.ndarray  # (N, 3) in [0, 1]
    log_scales: np.ndarray  # (N, 3) log-meters
    quats: np.ndarray  # (N, 4) (w, x, y, z)
    opacity_logits: np.ndarray  # (N,)
    instance_ids: np.ndarray  # (N,) int64, INSTANCE_NONE for background
    alive: np.ndarray  # (N,) bool

    @classmethod
    def empty(cls) -> "GaussianField":
        return cls(
            centers=np.zeros((0, 3)),
            colors=np.zeros((0, 3)),
            log_scales=np.zeros((0, 3)),
            quats=np.zeros((0, 4)),
            opacity_logits=np.zeros(0),
            instance_ids=np.zeros(0, dtype=np.int64),
            alive=np.zeros(0, dtype=bool),
        )

    @classmethod
    def from_splats(cls, splats) -> "GaussianField":
        splats = list(splats)
        if not splats:
            return cls.empty()
        return cls(
            centers=np.array([g.center for g in splats], dtype=np.float64),
            colors=np.array([g.color for g in splats], dtype=np.float64),
            log_scales=np.array([g.log_scale for g in splats], dtype=np.float64),
            quats=np.array([g.rotation for g in splats], dtype=np.float64),
            opacity_logits=np.array([g.opacity_logit for g in splats], dtype=np.float64),
            instance_ids=np.array(
                [INSTANCE_NONE if g.instance_id is None else g.instance_id for g in splats],
                dtype=np.int64,
            ),
            alive=np.ones(len(splats), dtype=bool),
        )

    @classmethod
    def from_arrays(cls, centers, colors, log_scales, quats, opacity_logits, instance_ids) -> "GaussianField":
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        n = len(centers)
        return cls(
            centers=centers,
            colors=np.asarray(colors, dtype=np.float64).reshape(n, 3),
            log_scales=np.asarray(log_scales, dtype=np.float64).reshape(n, 3),
            quats=np.asarray(quats, dtype=np.float64).reshape(n, 4),
            opacity_logits=np.asarray(opacity_logits, dtype=np.float64).reshape(n),
            instance_ids=np.asarray(instance_ids, dtype=np.int64).reshape(n),
            alive=np.ones(n, dtype=bool),
        )

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def n_alive(self) -> int:
        return int(np.count_nonzero(self.alive))

    def append(self, other: "GaussianField") -> np.ndarray:
        """Concatenate `other`; returns the ids assigned to the new Gaussians."""
        start = len(self)
        self.centers = np.concatenate([self.centers, other.centers])
        self.colors = np.concatenate([self.colors, other.colors])
        self.log_scales = np.concatenate([self.log_scales, other.log_scales])
        self.quats = np.concatenate([self.quats, other.quats])
        self.opacity_logits = np.concatenate([self.opacity_logits, other.opacity_logits])
        self.instance_ids = np.concatenate([self.instance_ids, other.instance_ids])
        self.alive = np.concatenate([self.alive, other.alive])
        return np.arange(start, len(self))

    def kill(self, ids) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        self.alive[ids] = False

    def copy(self) -> "GaussianField":
        return GaussianField(
            centers=self.centers.copy(),
            colors=self.colors.copy(),
            log_scales=self.log_scales.copy(),
            quats=self.quats.copy(),
            opacity_logits=self.opacity_logits.copy(),
            instance_ids=self.instance_ids.copy(),
            alive=self.alive.copy(),
        )

    def rotations(self) -> np.ndarray:
        """(N, 3, 3) rotation matrices from normalized quaternions."""
        return quats_to_rotations(self.quats)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def covariances(self) -> np.ndarray:
        """(N, 3, 3) world covariances R diag(exp(2s)) R^T."""
        R = self.rotations()
        d = np.exp(2.0 * self.log_scales)  # (N, 3)
        return np.einsum("nij,nj,nkj->nik", R, d, R)

    def to_splats(self, alive_only: bool = True) -> list[GaussianSplat]:
        idx = np.flatnonzero(self.alive) if alive_only else np.arange(len(self))
        out = []
        for i in idx:
            iid = int(self.instance_ids[i])
            out.append(
                GaussianSplat(
                    center=self.centers[i],
                    color=self.colors[i],
                    log_scale=self.log_scales[i],
                    rotation=self.quats[i],
                    opacity_logit=self.opacity_logits[i],
                    instance_id=None if iid == INSTANCE_NONE else iid,
                )
            )
        return out


def quats_to_rotations(quats: np.ndarray) -> np.ndarray:
    """Vectorized quaternion-to-rotation; inputs are normalized first."""
    q = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R
