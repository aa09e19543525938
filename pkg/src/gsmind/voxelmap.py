"""Sparse probabilistic voxel grid.

Each cell keeps up to three candidate instance slots with hit counts plus a
total count, yielding per-voxel instance assignment probabilities
P_k(v) = c_k(v) / c(v). Cells also index the Gaussians seeded inside them so
instance association can render local subsets only.

Keys are integer triples floor(p / resolution). Single-writer: mutations are
serialized by the owner; the read-only queries are safe between mutations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyObservation, ShapeMismatch, UnknownVoxel
from .geometry import Intrinsics, Pose

VoxelKey = tuple[int, int, int]

MAX_SLOTS = 3
DEFAULT_RESOLUTION = 0.02
MAX_DEPTH = 8.0  # m, sensor reliability cutoff


@dataclass
class VoxelCell:
    slot_ids: list = field(default_factory=list)  # <= MAX_SLOTS instance ids
    slot_counts: list = field(default_factory=list)
    total: int = 0  # c(v)
    gaussian_ids: list = field(default_factory=list)
    observed: bool = False

    def probability(self, instance_id: int) -> float:
        if self.total <= 0:
            return 0.0
        for iid, cnt in zip(self.slot_ids, self.slot_counts):
            if iid == instance_id:
                return cnt / self.total
        return 0.0


def backproject_pixels(depth: np.ndarray, pose: Pose, K: Intrinsics,
                       mask: np.ndarray | None = None,
                       max_depth: float = MAX_DEPTH):
    """World points of valid-depth pixels; returns (points, rows, cols)."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = (depth > 0) & (depth <= max_depth)
    if mask is not None:
        valid &= mask.astype(bool)
    rows, cols = np.nonzero(valid)
    d = depth[rows, cols]
    x = (cols - K.cx) / K.fx * d
    y = (rows - K.cy) / K.fy * d
    cam = np.stack([x, y, d], axis=1)
    return pose.camera_to_world(cam), rows, cols


class VoxelMap:
    def __init__(self, resolution: float = DEFAULT_RESOLUTION, max_depth: float = MAX_DEPTH):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.resolution = float(resolution)
        self.max_depth = float(max_depth)
        self.cells: dict[VoxelKey, VoxelCell] = {}
        self._instance_voxels: dict[int, int] = {}  # V_hat per instance
        self._gaussian_keys: dict[int, set[VoxelKey]] = {}

    def __len__(self) -> int:
        return len(self.cells)

    def keys_of_points(self, points: np.ndarray) -> np.ndarray:
        """(N, 3) int64 voxel keys of world points."""
        return np.floor(np.asarray(points, dtype=np.float64) / self.resolution).astype(np.int64)

    # -- observation integration ------------------------------------------

    def integrate_frame(self, depth: np.ndarray, pose: Pose, K: Intrinsics):
        """Mark all back-projected voxels observed.

        Returns (new_keys, seed_pixels): the keys observed for the first time
        and, for each, the (row, col) of the first pixel that hit it in
        row-major scan order (used to seed densification).
        """
        pts, rows, cols = backproject_pixels(depth, pose, K, max_depth=self.max_depth)
        new_keys: set[VoxelKey] = set()
        seed_pixels: dict[VoxelKey, tuple[int, int]] = {}
        if len(pts) == 0:
            return new_keys, seed_pixels
        keys = self.keys_of_points(pts)
        for (kx, ky, kz), r, c in zip(keys.tolist(), rows.tolist(), cols.tolist()):
            key = (kx, ky, kz)
            cell = self.cells.get(key)
            if cell is None:
                cell = VoxelCell(observed=True)
                self.cells[key] = cell
                new_keys.add(key)
                seed_pixels[key] = (r, c)
            elif not cell.observed:
                cell.observed = True
                new_keys.add(key)
                seed_pixels[key] = (r, c)
        return new_keys, seed_pixels

    def peek_new_voxels(self, depth: np.ndarray, pose: Pose, K: Intrinsics) -> set:
        """Keys integrate_frame would report as new, without mutating."""
        pts, _, _ = backproject_pixels(depth, pose, K, max_depth=self.max_depth)
        if len(pts) == 0:
            return set()
        keys = self.keys_of_points(pts)
        out = set()
        for kx, ky, kz in set(map(tuple, keys.tolist())):
            cell = self.cells.get((kx, ky, kz))
            if cell is None or not cell.observed:
                out.add((kx, ky, kz))
        return out

    def backproject_mask(self, mask: np.ndarray, depth: np.ndarray,
                         pose: Pose, K: Intrinsics) -> set:
        """Voxel keys under the valid-depth pixels of a mask (V_i^t)."""
        mask = np.asarray(mask)
        depth = np.asarray(depth)
        if mask.shape != depth.shape:
            raise ShapeMismatch(f"mask {mask.shape} vs depth {depth.shape}")
        pts, _, _ = backproject_pixels(depth, pose, K, mask=mask, max_depth=self.max_depth)
        if len(pts) == 0:
            return set()
        return set(map(tuple, self.keys_of_points(pts).tolist()))

    # -- instance statistics ----------------------------------------------

    def assignment_probability(self, key: VoxelKey, instance_id: int) -> float:
        cell = self.cells.get(tuple(key))
        return 0.0 if cell is None else cell.probability(instance_id)

    def candidate_instances(self, keys) -> set:
        out: set[int] = set()
        for key in keys:
            cell = self.cells.get(tuple(key))
            if cell is not None:
                out.update(cell.slot_ids)
        return out

    def geo_similarity(self, keys, instance_id: int) -> float:
        """(1/|V|) sum_v P_k(v) over the observation's voxels."""
        keys = list(keys)
        if not keys:
            raise EmptyObservation("geo similarity over an empty voxel set")
        total = 0.0
        for key in keys:
            cell = self.cells.get(tuple(key))
            if cell is not None:
                total += cell.probability(instance_id)
        return total / len(keys)

    def record_hits(self, keys, instance_id: int) -> None:
        """c(v) += 1 everywhere; claim or create a slot for the instance.

        When all slots are taken the minimum-count slot is evicted and the
        new instance starts at count 1.
        """
        for key in keys:
            key = tuple(key)
            cell = self.cells.get(key)
            if cell is None:
                cell = VoxelCell(observed=True)
                self.cells[key] = cell
            cell.total += 1
            if instance_id in cell.slot_ids:
                cell.slot_counts[cell.slot_ids.index(instance_id)] += 1
            elif len(cell.slot_ids) < MAX_SLOTS:
                cell.slot_ids.append(instance_id)
                cell.slot_counts.append(1)
                self._instance_voxels[instance_id] = self._instance_voxels.get(instance_id, 0) + 1
            else:
                evict = int(np.argmin(cell.slot_counts))
                old = cell.slot_ids[evict]
                self._instance_voxels[old] = self._instance_voxels.get(old, 1) - 1
                cell.slot_ids[evict] = instance_id
                cell.slot_counts[evict] = 1
                self._instance_voxels[instance_id] = self._instance_voxels.get(instance_id, 0) + 1

    def instance_voxel_count(self, instance_id: int) -> int:
        """V_hat: number of voxels currently holding a slot for the instance."""
        return max(0, self._instance_voxels.get(instance_id, 0))

    # -- voxel -> Gaussian index ------------------------------------------

    def register_gaussians(self, keys, gaussian_ids) -> None:
        keys = [tuple(k) for k in keys]
        for key in keys:
            if key not in self.cells:
                raise UnknownVoxel(f"voxel {key} does not exist")
        gaussian_ids = [int(g) for g in np.atleast_1d(gaussian_ids)]
        for key, gid in zip(keys, gaussian_ids):
            self.cells[key].gaussian_ids.append(gid)
            self._gaussian_keys.setdefault(gid, set()).add(key)

    def gaussians_for(self, keys) -> list:
        """Sorted unique Gaussian ids registered under the given keys."""
        out: set[int] = set()
        for key in keys:
            cell = self.cells.get(tuple(key))
            if cell is not None:
                out.update(cell.gaussian_ids)
        return sorted(out)

    def drop_gaussians(self, gaussian_ids) -> None:
        for gid in np.atleast_1d(gaussian_ids):
            gid = int(gid)
            for key in self._gaussian_keys.pop(gid, ()):
                cell = self.cells.get(key)
                if cell is not None and gid in cell.gaussian_ids:
                    cell.gaussian_ids.remove(gid)

    # -- removals -----------------------------------------------------------

    def remove_instance(self, instance_id: int, owned_gaussian_ids=()) -> None:
        """Delete the instance's slots everywhere and drop its Gaussians."""
        for cell in self.cells.values():
            if instance_id in cell.slot_ids:
                i = cell.slot_ids.index(instance_id)
                cell.total -= cell.slot_counts[i]
                del cell.slot_ids[i]
                del cell.slot_counts[i]
        self._instance_voxels.pop(instance_id, None)
        self.drop_gaussians(owned_gaussian_ids)
