"""Evaluation metrics: segmentation, photometric, grounding, update success.

All evaluators are pure functions; repeated evaluation is identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import psnr, ssim
from .mapstate import GaussianMap
from .renderer import render_frame
from .synth import GroundTruth

BACKGROUND = "background"
ADDITION_IOU = 0.25


def _distance_to_box(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Unsigned distance from points to an AABB surface (0 inside)."""
    below = np.maximum(lo - points, 0.0)
    above = np.maximum(points - hi, 0.0)
    return np.linalg.norm(below + above, axis=-1)


def _distance_to_room(points: np.ndarray, room: np.ndarray) -> np.ndarray:
    """Distance to the nearest interior wall of the room box."""
    d_lo = np.abs(points)
    d_hi = np.abs(room[None, :] - points)
    return np.minimum(d_lo, d_hi).min(axis=-1)


def _nearest_surface_labels(points: np.ndarray, truth: GroundTruth) -> list:
    """Category of the nearest surface (objects or room background)."""
    best = _distance_to_room(points, np.asarray(truth.spec.room, dtype=np.float64))
    labels = [BACKGROUND] * len(points)
    label_arr = np.array(labels, dtype=object)
    for obj in truth.spec.objects:
        lo, hi = obj.bbox()
        if obj.shape == "sphere":
            c = np.asarray(obj.position)
            dist = np.abs(np.linalg.norm(points - c, axis=-1) - float(obj.size[0]))
        else:
            dist = _distance_to_box(points, np.asarray(lo), np.asarray(hi))
        closer = dist < best
        best = np.where(closer, dist, best)
        label_arr[closer] = obj.category
    return list(label_arr)


def eval_segmentation(gmap: GaussianMap, truth: GroundTruth) -> dict:
    """mAcc / mIoU / F-mIoU of per-Gaussian predicted categories.

    Predicted: argmax cosine of the owning instance's fused feature against
    the category table. Ground truth: category of the nearest surface point
    (room surfaces count as background).
    """
    cats = sorted(truth.category_features)
    table = np.stack([truth.category_features[c] for c in cats])
    table = table / np.linalg.norm(table, axis=1, keepdims=True)

    predicted_by_instance = {}
    for iid, rec in gmap.records.items():
        f = rec.unit_feature()
        predicted_by_instance[iid] = cats[int(np.argmax(table @ f))]

    field = gmap.gaussians
    fg = field.alive & (field.instance_ids >= 0)
    idx = np.flatnonzero(fg)
    if len(idx) == 0:
        return {"mAcc": 0.0, "mIoU": 0.0, "F-mIoU": 0.0, "n_gaussians": 0,
                "background_fraction": 0.0, "per_class_iou": {}}
    points = field.centers[idx]
    gt_all = _nearest_surface_labels(points, truth)
    pred_all = [predicted_by_instance.get(int(i), BACKGROUND) for i in field.instance_ids[idx]]
    # Gaussians nearest to a room surface have no expressible class in the
    # object-category table; they are excluded from the confusion and
    # reported as a diagnostic fraction instead.
    keep = [i for i, g in enumerate(gt_all) if g != BACKGROUND]
    background_fraction = 1.0 - len(keep) / len(gt_all)
    gt = [gt_all[i] for i in keep]
    pred = [pred_all[i] for i in keep]
    if not gt:
        return {"mAcc": 0.0, "mIoU": 0.0, "F-mIoU": 0.0, "n_gaussians": int(len(idx)),
                "background_fraction": background_fraction, "per_class_iou": {}}

    classes = sorted(set(gt) | set(pred))
    index = {c: i for i, c in enumerate(classes)}
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for g, p in zip(gt, pred):
        confusion[index[g], index[p]] += 1

    present = [c for c in classes if confusion[index[c]].sum() > 0]
    accs, ious, freqs = [], [], []
    for c in present:
        i = index[c]
        tp = confusion[i, i]
        fn = confusion[i].sum() - tp
        fp = confusion[:, i].sum() - tp
        accs.append(tp / (tp + fn))
        ious.append(tp / (tp + fn + fp) if (tp + fn + fp) > 0 else 0.0)
        freqs.append(confusion[i].sum())
    freqs = np.asarray(freqs, dtype=np.float64)
    freqs /= freqs.sum()
    return {
        "mAcc": float(np.mean(accs)),
        "mIoU": float(np.mean(ious)),
        "F-mIoU": float(np.sum(freqs * np.asarray(ious))),
        "n_gaussians": int(len(idx)),
        "background_fraction": background_fraction,
        "per_class_iou": {c: float(v) for c, v in zip(present, ious)},
    }


def eval_photometric(gmap: GaussianMap, poses, target_frames, K) -> dict:
    """Mean PSNR / SSIM of renders against held-out target frames."""
    psnrs, ssims = [], []
    for pose, frame in zip(poses, target_frames):
        out = render_frame(gmap.gaussians, pose, K)
        target = frame.color if hasattr(frame, "color") else frame
        psnrs.append(psnr(out.color, target))
        ssims.append(ssim(out.color, target))
    return {"PSNR": float(np.mean(psnrs)), "SSIM": float(np.mean(ssims)),
            "n_views": len(psnrs)}


def iou3d(a_min, a_max, b_min, b_max) -> float:
    a_min, a_max = np.asarray(a_min, dtype=np.float64), np.asarray(a_max, dtype=np.float64)
    b_min, b_max = np.asarray(b_min, dtype=np.float64), np.asarray(b_max, dtype=np.float64)
    inter = np.prod(np.maximum(np.minimum(a_max, b_max) - np.maximum(a_min, b_min), 0.0))
    vol_a = np.prod(np.maximum(a_max - a_min, 0.0))
    vol_b = np.prod(np.maximum(b_max - b_min, 0.0))
    union = vol_a + vol_b - inter
    return float(inter / union) if union > 0 else 0.0


def eval_grounding(results, truth_boxes, thresholds=(0.1, 0.25, 0.5)) -> dict:
    """AP at 3D-IoU thresholds.

    `results` pairs a predicted (bbox_min, bbox_max) with the ground-truth
    box of the query's target. With one unranked prediction per query, AP at
    a threshold is the fraction of queries whose box clears it.
    """
    out = {}
    for thr in thresholds:
        if not results:
            out[f"AP@{thr}"] = 0.0
            continue
        hits = 0
        for (p_min, p_max), (t_min, t_max) in zip(results, truth_boxes):
            if iou3d(p_min, p_max, t_min, t_max) >= thr:
                hits += 1
        out[f"AP@{thr}"] = hits / len(results)
    return out


@dataclass
class UpdateTrialResult:
    kind: str  # "remove" | "add" | "move"
    removed_ok: bool = True  # target instance was removed
    added_ok: bool = True  # a new node overlaps the truth box at IoU >= 0.25


def removal_success(report, target_instance: int) -> bool:
    return target_instance in report.removed


def addition_success(report, gmap: GaussianMap, truth_box) -> bool:
    from .scenegraph import node_geometry

    for iid in report.new:
        if iid not in gmap.records:
            continue
        try:
            _, lo, hi = node_geometry(gmap, iid)
        except Exception:
            continue
        if iou3d(lo, hi, truth_box[0], truth_box[1]) >= ADDITION_IOU:
            return True
    return False


def eval_updates(trials) -> dict:
    """Success rates per change kind plus overall.

    remove: the target instance left the map. add: some spawned node overlaps
    the truth box (IoU >= 0.25). move: both conditions hold.
    """
    per_kind: dict[str, list[bool]] = {"remove": [], "add": [], "move": []}
    for t in trials:
        if t.kind == "remove":
            per_kind["remove"].append(t.removed_ok)
        elif t.kind == "add":
            per_kind["add"].append(t.added_ok)
        else:
            per_kind["move"].append(t.removed_ok and t.added_ok)
    out = {}
    all_success = []
    for kind, flags in per_kind.items():
        if flags:
            out[kind] = {"success": int(sum(flags)), "total": len(flags),
                         "rate": sum(flags) / len(flags)}
        all_success.extend(flags)
    out["overall"] = {
        "success": int(sum(all_success)),
        "total": len(all_success),
        "rate": sum(all_success) / len(all_success) if all_success else 0.0,
    }
    return out
