"""Deterministic synthetic scenes: analytic ray-cast RGB-D with exact truth.

A scene is a room box (interior faces visible, +y up) holding axis-aligned
boxes and spheres. Rays are cast analytically so color, depth and per-pixel
instance labels are mutually consistent by construction. Per-category
semantic features are fixed random unit vectors; each observation adds
seeded noise (sigma 0.05) and renormalizes. Edit scripts (remove / add /
move) re-render the same trajectory against the mutated object set.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .bundle import Bundle, load_bundle, write_frame, write_metadata
from .errors import InvalidEdit
from .fsio import atomic_write_text
from .geometry import Intrinsics, Pose, look_at

logger = logging.getLogger(__name__)

AMBIENT = 0.65
DIFFUSE = 0.35
LIGHT_DIR = np.array([0.3, 0.8, 0.5]) / np.linalg.norm([0.3, 0.8, 0.5])
RAY_NEAR = 0.05
MIN_MASK_PIXELS = 8  # slivers below this are background, like a real detector


@dataclass
class SceneObject:
    shape: str  # "box" | "sphere"
    size: tuple  # box: full extents (sx, sy, sz); sphere: (radius,)
    position: tuple  # center, m
    color: tuple  # albedo in [0, 1]
    category: str
    role: str = "Standalone"
    label: int = 0  # assigned at generation; stable across edits

    def bbox(self) -> tuple:
        p = np.asarray(self.position, dtype=np.float64)
        if self.shape == "sphere":
            r = float(self.size[0])
            return p - r, p + r
        half = np.asarray(self.size, dtype=np.float64) / 2.0
        return p - half, p + half


@dataclass
class SceneSpec:
    seed: int = 0
    room: tuple = (2.4, 1.6, 2.4)  # extents, +y up
    objects: list = dataclass_field(default_factory=list)
    trajectory: str = "orbit"  # "orbit" | "linear"
    n_frames: int = 60
    image_size: tuple = (64, 64)  # (width, height)
    feature_dim: int = 512
    feature_noise: float = 0.05
    fov_deg: float = 70.0
    orbit_radius: float | None = None
    orbit_height: float | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "room": list(self.room),
            "objects": [
                {
                    "shape": o.shape, "size": list(o.size), "position": list(o.position),
                    "color": list(o.color), "category": o.category, "role": o.role,
                    "label": o.label,
                }
                for o in self.objects
            ],
            "trajectory": self.trajectory,
            "n_frames": self.n_frames,
            "image_size": list(self.image_size),
            "feature_dim": self.feature_dim,
            "feature_noise": self.feature_noise,
            "fov_deg": self.fov_deg,
            "orbit_radius": self.orbit_radius,
            "orbit_height": self.orbit_height,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        objects = [
            SceneObject(
                shape=o["shape"], size=tuple(o["size"]), position=tuple(o["position"]),
                color=tuple(o["color"]), category=o["category"],
                role=o.get("role", "Standalone"), label=int(o.get("label", 0)),
            )
            for o in doc.get("objects", [])
        ]
        return cls(
            seed=int(doc.get("seed", 0)),
            room=tuple(doc.get("room", (2.4, 1.6, 2.4))),
            objects=objects,
            trajectory=doc.get("trajectory", "orbit"),
            n_frames=int(doc.get("n_frames", 60)),
            image_size=tuple(doc.get("image_size", (64, 64))),
            feature_dim=int(doc.get("feature_dim", 512)),
            feature_noise=float(doc.get("feature_noise", 0.05)),
            fov_deg=float(doc.get("fov_deg", 70.0)),
            orbit_radius=doc.get("orbit_radius"),
            orbit_height=doc.get("orbit_height"),
        )


@dataclass
class GroundTruth:
    spec: SceneSpec
    category_features: dict  # category -> unit (D,) vector
    poses: list
    intrinsics: Intrinsics

    def annotator_table(self) -> list:
        """Rows for MockAnnotator: (color, category, caption, role)."""
        table = []
        seen = set()
        for obj in self.spec.objects:
            if obj.label in seen:
                continue
            seen.add(obj.label)
            table.append((obj.color, obj.category, f"a {obj.category}", obj.role))
        return table

    def object_boxes(self) -> dict:
        return {o.label: o.bbox() for o in self.spec.objects}


def intrinsics_for(spec: SceneSpec) -> Intrinsics:
    w, h = spec.image_size
    f = w / (2.0 * np.tan(np.radians(spec.fov_deg) / 2.0))
    return Intrinsics(fx=f, fy=f, cx=w / 2.0, cy=h / 2.0, width=w, height=h)


def trajectory_poses(spec: SceneSpec) -> list:
    room = np.asarray(spec.room, dtype=np.float64)
    if spec.objects:
        target = np.mean([np.asarray(o.position) for o in spec.objects], axis=0)
    else:
        target = room / 2.0
    up = np.array([0.0, 1.0, 0.0])
    poses = []
    if spec.trajectory == "orbit":
        radius = spec.orbit_radius or 0.38 * min(room[0], room[2])
        height = spec.orbit_height or 0.65 * room[1]
        center = room / 2.0
        for i in range(spec.n_frames):
            theta = 2.0 * np.pi * i / max(spec.n_frames, 1)
            eye = np.array(
                [center[0] + radius * np.cos(theta), height, center[2] + radius * np.sin(theta)]
            )
            poses.append(look_at(eye, target, up))
    elif spec.trajectory == "linear":
        p0 = np.array([0.25 * room[0], 0.6 * room[1], 0.25 * room[2]])
        p1 = np.array([0.75 * room[0], 0.6 * room[1], 0.75 * room[2]])
        for i in range(spec.n_frames):
            a = i / max(spec.n_frames - 1, 1)
            poses.append(look_at(p0 * (1 - a) + p1 * a, target, up))
    else:
        raise ValueError(f"unknown trajectory {spec.trajectory!r}")
    return poses


def raycast_frame(spec: SceneSpec, pose: Pose, K: Intrinsics):
    """(color, depth, labels): analytic intersection of all pixel rays."""
    H, W = K.height, K.width
    us = np.arange(W, dtype=np.float64)
    vs = np.arange(H, dtype=np.float64)
    dirs_cam = np.empty((H, W, 3))
    dirs_cam[..., 0] = (us[None, :] - K.cx) / K.fx
    dirs_cam[..., 1] = (vs[:, None] - K.cy) / K.fy
    dirs_cam[..., 2] = 1.0
    d = dirs_cam @ pose.rotation.T  # world directions, camera z = ray parameter
    o = pose.translation

    with np.errstate(divide="ignore", invalid="ignore"):
        inv_d = 1.0 / d

    # room interior: exit distance through the nearest wall
    room = np.asarray(spec.room, dtype=np.float64)
    t_exit = np.full((H, W), np.inf)
    exit_axis = np.zeros((H, W), dtype=np.int64)
    for ax in range(3):
        t_lo = (0.0 - o[ax]) * inv_d[..., ax]
        t_hi = (room[ax] - o[ax]) * inv_d[..., ax]
        t_far = np.where(np.isfinite(inv_d[..., ax]), np.maximum(t_lo, t_hi), np.inf)
        closer = t_far < t_exit
        t_exit = np.where(closer, t_far, t_exit)
        exit_axis = np.where(closer, ax, exit_axis)

    best_t = t_exit
    labels = np.zeros((H, W), dtype=np.int64)
    normals = np.zeros((H, W, 3))
    for ax in range(3):
        sel = exit_axis == ax
        normals[sel, ax] = -np.sign(d[sel, ax])

    for obj in spec.objects:
        if obj.shape == "box":
            lo, hi = obj.bbox()
            t_near = np.full((H, W), -np.inf)
            t_far = np.full((H, W), np.inf)
            near_axis = np.zeros((H, W), dtype=np.int64)
            for ax in range(3):
                t1 = (lo[ax] - o[ax]) * inv_d[..., ax]
                t2 = (hi[ax] - o[ax]) * inv_d[..., ax]
                a_near = np.minimum(t1, t2)
                a_far = np.maximum(t1, t2)
                parallel = ~np.isfinite(inv_d[..., ax])
                inside = (o[ax] >= lo[ax]) & (o[ax] <= hi[ax])
                a_near = np.where(parallel, np.where(inside, -np.inf, np.inf), a_near)
                a_far = np.where(parallel, np.where(inside, np.inf, -np.inf), a_far)
                upd = a_near > t_near
                near_axis = np.where(upd, ax, near_axis)
                t_near = np.maximum(t_near, a_near)
                t_far = np.minimum(t_far, a_far)
            hit = (t_far >= t_near) & (t_near > RAY_NEAR) & (t_near < best_t)
            best_t = np.where(hit, t_near, best_t)
            labels = np.where(hit, obj.label, labels)
            for ax in range(3):
                sel = hit & (near_axis == ax)
                normals[sel] = 0.0
                normals[sel, ax] = -np.sign(d[sel, ax])
        elif obj.shape == "sphere":
            c = np.asarray(obj.position, dtype=np.float64)
            r = float(obj.size[0])
            oc = o - c
            a = np.einsum("ijc,ijc->ij", d, d)
            b = d @ oc
            disc = b * b - a * (oc @ oc - r * r)
            with np.errstate(invalid="ignore"):
                sq = np.sqrt(np.maximum(disc, 0.0))
                t_hit = (-b - sq) / a
            hit = (disc > 0) & (t_hit > RAY_NEAR) & (t_hit < best_t)
            best_t = np.where(hit, t_hit, best_t)
            labels = np.where(hit, obj.label, labels)
            p_hit = o + best_t[..., None] * d
            n_sphere = (p_hit - c) / r
            normals = np.where(hit[..., None], n_sphere, normals)
        else:
            raise ValueError(f"unknown shape {obj.shape!r}")

    albedo = np.zeros((H, W, 3))
    albedo[labels == 0] = (0.72, 0.70, 0.66)  # room surfaces
    for obj in spec.objects:
        albedo[labels == obj.label] = obj.color
    shade = AMBIENT + DIFFUSE * np.maximum(0.0, normals @ LIGHT_DIR)
    color = np.clip(albedo * shade[..., None], 0.0, 1.0)
    return color, best_t, labels


def category_feature_table(spec: SceneSpec) -> dict:
    """Fixed unit vector per category, seeded by the scene seed."""
    rng = np.random.default_rng(spec.seed)
    table = {}
    for cat in sorted({o.category for o in spec.objects}):
        v = rng.normal(size=spec.feature_dim)
        table[cat] = v / np.linalg.norm(v)
    return table


def generate_bundle(spec: SceneSpec, out_dir) -> tuple:
    """Render the scene to a bundle directory; returns (Bundle, GroundTruth)."""
    spec = _with_labels(spec)
    _validate_spec(spec)
    K = intrinsics_for(spec)
    poses = trajectory_poses(spec)
    table = category_feature_table(spec)
    noise_rng = np.random.default_rng(spec.seed + 1)

    out_dir = str(out_dir)
    write_metadata(out_dir, K, depth_scale=1000.0, feature_dim=spec.feature_dim,
                   frame_count=spec.n_frames)
    in_view = 0
    for i, pose in enumerate(poses):
        color, depth, labels = raycast_frame(spec, pose, K)
        for v in np.unique(labels):
            if v != 0 and np.count_nonzero(labels == v) < MIN_MASK_PIXELS:
                labels[labels == v] = 0
        present = sorted(int(v) for v in np.unique(labels) if v != 0)
        rows = {}
        feats = []
        boxes = {}
        hints = {}
        for label in present:
            obj = next(ob for ob in spec.objects if ob.label == label)
            noise = noise_rng.normal(scale=spec.feature_noise, size=spec.feature_dim)
            f = table[obj.category] + noise
            f = f / np.linalg.norm(f)
            rows[label] = len(feats)
            feats.append(f)
            ys, xs = np.nonzero(labels == label)
            boxes[label] = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
            hints[label] = obj.category
        feats_arr = np.array(feats) if feats else np.zeros((0, spec.feature_dim))
        write_frame(out_dir, i, color, depth, pose, labels, feats_arr, rows,
                    boxes=boxes, class_hints=hints)
        if len(present) >= max(1, len(spec.objects)) * 0.5:
            in_view += 1
    if spec.n_frames and in_view / spec.n_frames < 0.8:
        logger.warning("trajectory keeps the scene in view in only %d/%d frames",
                       in_view, spec.n_frames)

    truth = GroundTruth(spec=spec, category_features=table, poses=poses, intrinsics=K)
    save_truth(truth, os.path.join(out_dir, "truth.json"))
    return load_bundle(out_dir, validate=False), truth


def save_truth(truth: GroundTruth, path) -> None:
    doc = {
        "spec": truth.spec.to_dict(),
        "category_features": {
            k: [float(x) for x in v] for k, v in sorted(truth.category_features.items())
        },
    }
    atomic_write_text(path, json.dumps(doc, sort_keys=True))


def load_truth(path) -> GroundTruth:
    with open(str(path), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    spec = SceneSpec.from_dict(doc["spec"])
    table = {k: np.asarray(v, dtype=np.float64) for k, v in doc["category_features"].items()}
    return GroundTruth(
        spec=spec,
        category_features=table,
        poses=trajectory_poses(spec),
        intrinsics=intrinsics_for(spec),
    )


def _with_labels(spec: SceneSpec) -> SceneSpec:
    next_label = max((o.label for o in spec.objects), default=0) + 1
    for obj in spec.objects:
        if obj.label <= 0:
            obj.label = next_label
            next_label += 1
    return spec


def _validate_spec(spec: SceneSpec) -> None:
    room = np.asarray(spec.room)
    for obj in spec.objects:
        lo, hi = obj.bbox()
        if np.any(lo < 0) or np.any(hi > room):
            logger.warning("object %s (label %d) pokes outside the room", obj.category, obj.label)


# -- edit scripts -------------------------------------------------------------


@dataclass
class Edit:
    kind: str  # "remove" | "add" | "move"
    label: int | None = None
    obj: SceneObject | None = None
    new_position: tuple | None = None


@dataclass
class EditScript:
    edits: list = dataclass_field(default_factory=list)


def apply_edits(spec: SceneSpec, script: EditScript) -> SceneSpec:
    """New SceneSpec with the script applied; labels stay stable."""
    spec = _with_labels(spec)
    objects = [SceneObject(**{
        "shape": o.shape, "size": o.size, "position": o.position, "color": o.color,
        "category": o.category, "role": o.role, "label": o.label,
    }) for o in spec.objects]
    labels = {o.label for o in objects}
    next_label = max(labels, default=0) + 1
    for edit in script.edits:
        if edit.kind == "remove":
            if edit.label not in labels:
                raise InvalidEdit(f"remove: no object with label {edit.label}")
            objects = [o for o in objects if o.label != edit.label]
            labels.discard(edit.label)
        elif edit.kind == "add":
            if edit.obj is None:
                raise InvalidEdit("add: missing object")
            new = SceneObject(
                shape=edit.obj.shape, size=edit.obj.size, position=edit.obj.position,
                color=edit.obj.color, category=edit.obj.category, role=edit.obj.role,
                label=next_label,
            )
            objects.append(new)
            labels.add(next_label)
            next_label += 1
        elif edit.kind == "move":
            if edit.label not in labels:
                raise InvalidEdit(f"move: no object with label {edit.label}")
            for o in objects:
                if o.label == edit.label:
                    o.position = tuple(edit.new_position)
        else:
            raise InvalidEdit(f"unknown edit kind {edit.kind!r}")
    out = SceneSpec.from_dict({**spec.to_dict(), "objects": []})
    out.objects = objects
    return out


def mutate(bundle_or_dir, script: EditScript, out_dir) -> tuple:
    """Re-render a bundle's scene after applying the edit script."""
    path = bundle_or_dir.path if isinstance(bundle_or_dir, Bundle) else str(bundle_or_dir)
    truth = load_truth(os.path.join(path, "truth.json"))
    new_spec = apply_edits(truth.spec, script)
    return generate_bundle(new_spec, out_dir)
