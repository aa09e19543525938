"""Ingestion bundle: the on-disk interchange format for posed RGB-D frames.

Layout (all little-endian, paths relative to the bundle directory):

    metadata.json              intrinsics, depth_scale (units per meter),
                               feature_dim, frame_count
    frames/NNNNNN.color.png    8-bit RGB
    frames/NNNNNN.depth.png    16-bit grayscale, depth_scale units per meter
    frames/NNNNNN.pose.txt     16 numbers, 4x4 row-major camera-to-world
    frames/NNNNNN.labels.png   16-bit instance labels, 0 = background
    frames/NNNNNN.instances.json  per label: feature row index, optional
                               detector box and class hint
    frames/NNNNNN.features.bin float32 rows x feature_dim, unit norm

Every label value present in the label image must have a metadata entry and
a feature row; feature rows off unit norm beyond 1e-3 are renormalized with
a warning.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .errors import BadDepthScale, BadShape, MissingFile
from .fsio import atomic_write_bytes, atomic_write_text
from .geometry import Intrinsics, Pose
from .observations import FrameObservation, InstanceObservation

logger = logging.getLogger(__name__)

FEATURE_NORM_WARN = 1e-3
DEFAULT_DEPTH_SCALE = 1000.0  # millimeters


def _imwrite(path: str, array: np.ndarray) -> None:
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def _imread(path: str) -> np.ndarray:
    from PIL import Image

    if not os.path.exists(path):
        raise MissingFile(path)
    return np.array(Image.open(path))


@dataclass
class BundleMeta:
    intrinsics: Intrinsics
    depth_scale: float
    feature_dim: int
    frame_count: int


class Bundle:
    """Read access to a bundle directory; frames load lazily."""

    def __init__(self, path, meta: BundleMeta):
        self.path = str(path)
        self.meta = meta

    @property
    def intrinsics(self) -> Intrinsics:
        return self.meta.intrinsics

    def _frame_path(self, index: int, suffix: str) -> str:
        return os.path.join(self.path, "frames", f"{index:06d}.{suffix}")

    def frame(self, index: int, validate: bool = False) -> FrameObservation:
        color8 = _imread(self._frame_path(index, "color.png"))
        depth16 = _imread(self._frame_path(index, "depth.png"))
        labels = _imread(self._frame_path(index, "labels.png")).astype(np.int64)
        pose_path = self._frame_path(index, "pose.txt")
        if not os.path.exists(pose_path):
            raise MissingFile(pose_path)
        with open(pose_path, "r", encoding="utf-8") as fh:
            pose = Pose.from_text(fh.read())
        inst_path = self._frame_path(index, "instances.json")
        if not os.path.exists(inst_path):
            raise MissingFile(inst_path)
        with open(inst_path, "r", encoding="utf-8") as fh:
            inst_meta = json.load(fh)
        feat_path = self._frame_path(index, "features.bin")
        if not os.path.exists(feat_path):
            raise MissingFile(feat_path)
        raw = np.fromfile(feat_path, dtype="<f4")

        K = self.meta.intrinsics
        if color8.shape[:2] != (K.height, K.width) or color8.ndim != 3:
            raise BadShape(f"frame {index}: color shape {color8.shape}")
        if depth16.shape != (K.height, K.width):
            raise BadShape(f"frame {index}: depth shape {depth16.shape}")
        if labels.shape != (K.height, K.width):
            raise BadShape(f"frame {index}: label shape {labels.shape}")
        D = self.meta.feature_dim
        if raw.size % D != 0:
            raise BadShape(f"frame {index}: feature block size {raw.size} not a multiple of {D}")
        features = raw.reshape(-1, D).astype(np.float64)

        present = sorted(int(v) for v in np.unique(labels) if v != 0)
        observations = []
        for label in present:
            entry = inst_meta.get(str(label))
            if entry is None:
                raise BadShape(f"frame {index}: label {label} missing from instances.json")
            row = int(entry["row"])
            if row < 0 or row >= len(features):
                raise BadShape(f"frame {index}: label {label} feature row {row} out of range")
            feat = features[row]
            norm = float(np.linalg.norm(feat))
            if abs(norm - 1.0) > FEATURE_NORM_WARN:
                logger.warning(
                    "frame %d label %d: feature norm %.4f, renormalizing", index, label, norm
                )
                feat = feat / norm
            box = entry.get("box")
            observations.append(
                InstanceObservation(
                    mask=labels == label,
                    feature=feat,
                    frame_id=index,
                    box=tuple(box) if box else None,
                    class_hint=entry.get("class_hint"),
                    label=label,
                )
            )
        if validate:
            for key, entry in inst_meta.items():
                if int(entry["row"]) >= len(features):
                    raise BadShape(f"frame {index}: metadata row overflow for label {key}")

        return FrameObservation(
            frame_id=index,
            color=color8.astype(np.float64) / 255.0,
            depth=depth16.astype(np.float64) / self.meta.depth_scale,
            pose=pose,
            observations=observations,
            label_image=labels,
        )

    def frames(self):
        for i in range(self.meta.frame_count):
            yield self.frame(i)


def load_bundle(path, validate: bool = True) -> Bundle:
    """Open and validate a bundle directory."""
    path = str(path)
    meta_path = os.path.join(path, "metadata.json")
    if not os.path.isdir(path) or not os.path.exists(meta_path):
        raise MissingFile(meta_path)
    with open(meta_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    ki = doc["intrinsics"]
    depth_scale = float(doc["depth_scale"])
    if depth_scale <= 0 or not np.isfinite(depth_scale):
        raise BadDepthScale(f"depth_scale {depth_scale}")
    meta = BundleMeta(
        intrinsics=Intrinsics(
            fx=float(ki["fx"]), fy=float(ki["fy"]),
            cx=float(ki["cx"]), cy=float(ki["cy"]),
            width=int(ki["width"]), height=int(ki["height"]),
        ),
        depth_scale=depth_scale,
        feature_dim=int(doc["feature_dim"]),
        frame_count=int(doc["frame_count"]),
    )
    bundle = Bundle(path, meta)
    if validate:
        for i in range(meta.frame_count):
            bundle.frame(i, validate=True)
    return bundle


def write_frame(path, index: int, color: np.ndarray, depth: np.ndarray,
                pose: Pose, labels: np.ndarray, features: np.ndarray,
                label_rows: dict, depth_scale: float = DEFAULT_DEPTH_SCALE,
                boxes: dict | None = None, class_hints: dict | None = None) -> None:
    """Write one frame's six files. `label_rows` maps label -> feature row."""
    frames_dir = os.path.join(str(path), "frames")
    os.makedirs(frames_dir, exist_ok=True)
    base = os.path.join(frames_dir, f"{index:06d}")

    color8 = (np.clip(color, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    _imwrite(base + ".color.png", color8)
    depth16 = np.clip(np.round(depth * depth_scale), 0, 65535).astype(np.uint16)
    _imwrite(base + ".depth.png", depth16)
    _imwrite(base + ".labels.png", labels.astype(np.uint16))
    atomic_write_text(base + ".pose.txt", pose.to_text())

    entries = {}
    for label, row in sorted(label_rows.items()):
        entry = {"row": int(row)}
        entry["box"] = list(boxes[label]) if boxes and label in boxes else None
        entry["class_hint"] = class_hints.get(label) if class_hints else None
        entries[str(int(label))] = entry
    atomic_write_text(base + ".instances.json", json.dumps(entries, sort_keys=True))
    atomic_write_bytes(base + ".features.bin",
                       np.asarray(features, dtype="<f4").tobytes())


def write_metadata(path, K: Intrinsics, depth_scale: float, feature_dim: int,
                   frame_count: int) -> None:
    doc = {
        "intrinsics": {
            "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
            "width": K.width, "height": K.height,
        },
        "depth_scale": depth_scale,
        "feature_dim": feature_dim,
        "frame_count": frame_count,
    }
    os.makedirs(str(path), exist_ok=True)
    atomic_write_text(os.path.join(str(path), "metadata.json"),
                      json.dumps(doc, sort_keys=True, indent=2))
