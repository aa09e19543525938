"""Binary map file: magic "GSM1", Gaussian arrays, voxel grid, records.

All values little-endian. Gaussian parameters are float32 per the format;
poses, weights and fused features in the record section are float64 so they
survive round trips exactly. Only alive Gaussians are written, remapped to
compact contiguous ids (the voxel index and record ownership follow).
load(save(m)) is byte-identical on a second save.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import BadMagic, TruncatedFile
from .fsio import atomic_write_bytes
from .geometry import Pose
from .mapstate import GaussianMap, InstanceRecord, ObservingView
from .splats import INSTANCE_NONE, GaussianField
from .voxelmap import MAX_SLOTS, VoxelCell, VoxelMap

MAGIC = b"GSM1"
VERSION = 1
ID_SENTINEL = 0xFFFFFFFF


def _pack_gaussians(field: GaussianField, keep: np.ndarray) -> bytes:
    inst = field.instance_ids[keep]
    inst32 = np.where(inst == INSTANCE_NONE, ID_SENTINEL, inst).astype("<u4")
    parts = [
        field.centers[keep].astype("<f4").tobytes(),
        field.colors[keep].astype("<f4").tobytes(),
        field.log_scales[keep].astype("<f4").tobytes(),
        field.quats[keep].astype("<f4").tobytes(),
        field.opacity_logits[keep].astype("<f4").tobytes(),
        inst32.tobytes(),
    ]
    return b"".join(parts)


def save_map(gmap: GaussianMap, path) -> None:
    field = gmap.gaussians
    keep = np.flatnonzero(field.alive)
    remap = {int(old): new for new, old in enumerate(keep.tolist())}

    buf = io.BytesIO()
    voxel_keys = sorted(gmap.voxels.cells.keys())
    buf.write(MAGIC)
    buf.write(struct.pack("<IIIII", VERSION, len(keep), gmap.feature_dim,
                          len(gmap.records), len(voxel_keys)))
    buf.write(struct.pack("<Idd", gmap.next_instance_id,
                          gmap.voxels.resolution, gmap.voxels.max_depth))
    buf.write(_pack_gaussians(field, keep))

    for key in voxel_keys:
        cell = gmap.voxels.cells[key]
        buf.write(struct.pack("<iii", *key))
        buf.write(struct.pack("<I", cell.total))
        for s in range(MAX_SLOTS):
            if s < len(cell.slot_ids):
                buf.write(struct.pack("<II", cell.slot_ids[s], cell.slot_counts[s]))
            else:
                buf.write(struct.pack("<II", ID_SENTINEL, 0))
        gids = sorted(remap[g] for g in cell.gaussian_ids if g in remap)
        buf.write(struct.pack("<I", len(gids)))
        buf.write(np.asarray(gids, dtype="<u4").tobytes())

    for iid in sorted(gmap.records):
        rec = gmap.records[iid]
        buf.write(struct.pack("<I", iid))
        buf.write(struct.pack("<d", rec.weight))
        feat = np.zeros(gmap.feature_dim)
        feat[: len(rec.feature)] = rec.feature[: gmap.feature_dim]
        buf.write(feat.astype("<f8").tobytes())
        buf.write(struct.pack("<I", len(rec.views)))
        for view in rec.views:
            buf.write(struct.pack("<i", view.frame_id))
            buf.write(view.pose.matrix().astype("<f8").tobytes())
            buf.write(struct.pack("<II", view.mask_pixels, view.image_pixels))
        owned = sorted(remap[g] for g in rec.owned_gaussians if g in remap)
        buf.write(struct.pack("<I", len(owned)))
        buf.write(np.asarray(owned, dtype="<u4").tobytes())

    atomic_write_bytes(path, buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise TruncatedFile(f"needed {n} bytes at offset {self.off}")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def load_map(path) -> GaussianMap:
    with open(str(path), "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagic(f"{path}: bad magic")
    version, n, dim, n_records, n_voxels = r.unpack("<IIIII")
    if version != VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    next_id, resolution, max_depth = r.unpack("<Idd")

    centers = r.array("<f4", n * 3).astype(np.float64).reshape(n, 3)
    colors = r.array("<f4", n * 3).astype(np.float64).reshape(n, 3)
    log_scales = r.array("<f4", n * 3).astype(np.float64).reshape(n, 3)
    quats = r.array("<f4", n * 4).astype(np.float64).reshape(n, 4)
    logits = r.array("<f4", n).astype(np.float64)
    inst32 = r.array("<u4", n)
    inst = inst32.astype(np.int64)
    inst[inst32 == ID_SENTINEL] = INSTANCE_NONE
    field = GaussianField.from_arrays(centers, colors, log_scales, quats, logits, inst)

    voxels = VoxelMap(resolution=resolution, max_depth=max_depth)
    for _ in range(n_voxels):
        kx, ky, kz = r.unpack("<iii")
        (total,) = r.unpack("<I")
        cell = VoxelCell(total=int(total), observed=True)
        for _ in range(MAX_SLOTS):
            sid, cnt = r.unpack("<II")
            if sid != ID_SENTINEL:
                cell.slot_ids.append(int(sid))
                cell.slot_counts.append(int(cnt))
        (n_g,) = r.unpack("<I")
        cell.gaussian_ids = [int(g) for g in r.array("<u4", n_g)]
        key = (int(kx), int(ky), int(kz))
        voxels.cells[key] = cell
        for sid in cell.slot_ids:
            voxels._instance_voxels[sid] = voxels._instance_voxels.get(sid, 0) + 1
        for gid in cell.gaussian_ids:
            voxels._gaussian_keys.setdefault(gid, set()).add(key)

    records = {}
    for _ in range(n_records):
        (iid,) = r.unpack("<I")
        (weight,) = r.unpack("<d")
        feature = r.array("<f8", dim)
        (n_views,) = r.unpack("<I")
        views = []
        for _ in range(n_views):
            (frame_id,) = r.unpack("<i")
            mat = r.array("<f8", 16).reshape(4, 4)
            mask_px, image_px = r.unpack("<II")
            views.append(ObservingView(int(frame_id), Pose.from_matrix(mat),
                                       int(mask_px), int(image_px)))
        (n_owned,) = r.unpack("<I")
        owned = [int(g) for g in r.array("<u4", n_owned)]
        records[int(iid)] = InstanceRecord(
            id=int(iid), feature=feature, weight=float(weight),
            owned_gaussians=owned, views=views,
        )

    if r.off != len(data):
        raise TruncatedFile(f"{path}: {len(data) - r.off} trailing bytes")
    return GaussianMap(
        gaussians=field,
        voxels=voxels,
        records=records,
        next_instance_id=int(next_id),
        feature_dim=int(dim),
    )
