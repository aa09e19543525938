"""Forward alpha-blended splatting: color / depth / alpha / instance planes.

Per pixel p, depth-sorted Gaussians contribute alpha = min(0.99, o * G) with
G = exp(-0.5 d^T inv(cov2d) d), accumulated front to back with transmittance
T = prod(1 - alpha) and terminated once T < 1e-4. Both the production
renderer and the exhaustive oracle zero a Gaussian's contribution beyond its
CUTOFF_SIGMA footprint so the two paths are exactly equivalent; the cutoff is
wide enough (6 sigma, alpha < 2e-8 at the boundary) that the blend stays
smooth for finite-difference checks.

Pixel (row v, col u) is sampled at continuous coordinates (x=u, y=v).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, UnknownInstance
from .geometry import Intrinsics, Pose, project_gaussian
from .splats import INSTANCE_NONE, GaussianField

ALPHA_CLAMP = 0.99
TRANSMITTANCE_MIN = 1e-4
CUTOFF_SIGMA = 6.0
MASK_ALPHA_THRESHOLD = 0.5
SILHOUETTE_ALPHA = 0.98  # lambda8
# depth normalization: D = S_d / sqrt(S_w^2 + eps^2). Smooth everywhere,
# bounded gradients on near-empty fringe pixels, and within 1.3e-7 relative
# of the exact quotient once the accumulated alpha is meaningful
DEPTH_NORM_EPS = 5e-4


def _depth_normalizer(acc):
    return np.sqrt(acc * acc + DEPTH_NORM_EPS**2)
# Rendering skips Gaussians closer than this: the first-order projected
# covariance diverges as z -> 0 and a grazing Gaussian smears across the
# whole image. Shared with the oracle, so equivalence is exact. The
# geometry-level projection ops keep their own 0.01 m near plane.
RENDER_NEAR = 0.2


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) m, 0 where empty
    alpha_accum: np.ndarray  # (H, W) in [0, 1]
    instance_map: np.ndarray  # (H, W) int64, INSTANCE_NONE where uncovered


def _as_field(gaussians) -> GaussianField:
    if isinstance(gaussians, GaussianField):
        return gaussians
    return GaussianField.from_splats(gaussians)


def _project_for_render(field: GaussianField, pose: Pose, K: Intrinsics):
    """Cull, project and depth-sort the field.

    Returns None when nothing is visible, else a dict of per-visible-Gaussian
    arrays ordered front to back (stable in original index for equal depths).
    """
    if len(field) == 0:
        return None
    p_cam_all = (field.centers - pose.translation) @ pose.rotation
    vis = field.alive & (p_cam_all[:, 2] > RENDER_NEAR)
    idx = np.flatnonzero(vis)
    if len(idx) == 0:
        return None

    p_cam = p_cam_all[idx]
    z = p_cam[:, 2]
    mean_x = K.fx * p_cam[:, 0] / z + K.cx
    mean_y = K.fy * p_cam[:, 1] / z + K.cy

    sub = GaussianField(
        centers=field.centers[idx],
        colors=field.colors[idx],
        log_scales=field.log_scales[idx],
        quats=field.quats[idx],
        opacity_logits=field.opacity_logits[idx],
        instance_ids=field.instance_ids[idx],
        alive=field.alive[idx],
    )
    Rq = sub.rotations()
    cov_world = np.matmul(Rq * np.exp(2.0 * sub.log_scales)[:, None, :],
                          np.transpose(Rq, (0, 2, 1)))
    Q = pose.rotation.T
    cov_cam = np.matmul(np.matmul(Q[None], cov_world), pose.rotation[None])

    # J rows: [fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * p_cam[:, 0] / z**2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * p_cam[:, 1] / z**2
    cov2d = np.matmul(np.matmul(J, cov_cam), np.transpose(J, (0, 2, 1)))
    cov2d = 0.5 * (cov2d + np.transpose(cov2d, (0, 2, 1)))

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ok = det > 1e-300
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = CUTOFF_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))

    x0 = np.maximum(np.ceil(mean_x - radius), 0).astype(np.int64)
    x1 = np.minimum(np.floor(mean_x + radius), K.width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(mean_y - radius), 0).astype(np.int64)
    y1 = np.minimum(np.floor(mean_y + radius), K.height - 1).astype(np.int64)
    ok &= (x1 >= x0) & (y1 >= y0)
    if not np.any(ok):
        return None

    keep = np.flatnonzero(ok)
    d = det[keep]
    inv_a = c[keep] / d  # inverse covariance components [[ia, ib], [ib, ic]]
    inv_b = -b[keep] / d
    inv_c = a[keep] / d

    order = np.argsort(z[keep], kind="stable")
    rank = np.empty(len(keep), dtype=np.int64)
    rank[order] = np.arange(len(keep))

    return {
        "order": order,  # front-to-back traversal of the kept arrays
        "ids": idx[keep],  # original Gaussian ids
        "p_cam": p_cam[keep],
        "z": z[keep],
        "mean_x": mean_x[keep],
        "mean_y": mean_y[keep],
        "cov_cam": cov_cam[keep],
        "cov2d": cov2d[keep],
        "inv_a": inv_a,
        "inv_b": inv_b,
        "inv_c": inv_c,
        "rank": rank,
        "colors": sub.colors[keep],
        "opacities": sub.opacities()[keep],
        "instance_ids": sub.instance_ids[keep],
        "box": (x0[keep], x1[keep], y0[keep], y1[keep]),
    }


def _build_pairs(proj, K: Intrinsics):
    """Flatten footprint boxes into (gaussian, pixel) pair arrays.

    Pairs are sorted by (pixel, front-to-back rank) and filtered to the
    CUTOFF_SIGMA ellipse. Returns None when no pair survives.
    """
    x0, x1, y0, y1 = proj["box"]
    bw = x1 - x0 + 1
    counts = bw * (y1 - y0 + 1)
    total = int(counts.sum())
    if total == 0:
        return None
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    seg = np.repeat(np.arange(len(counts)), counts)
    local = np.arange(total) - starts[seg]
    bws = bw[seg]
    px = x0[seg] + local % bws
    py = y0[seg] + local // bws

    dx = px - proj["mean_x"][seg]
    dy = py - proj["mean_y"][seg]
    mdx = proj["inv_a"][seg] * dx + proj["inv_b"][seg] * dy
    mdy = proj["inv_b"][seg] * dx + proj["inv_c"][seg] * dy
    m2 = dx * mdx + dy * mdy
    inside = m2 <= CUTOFF_SIGMA**2
    if not np.any(inside):
        return None
    seg, px, py, m2 = seg[inside], px[inside], py[inside], m2[inside]
    dx, dy, mdx, mdy = dx[inside], dy[inside], mdx[inside], mdy[inside]

    pixel = py * K.width + px
    # unique combined key: front-to-back within each pixel
    sort = np.argsort(pixel * len(proj["rank"]) + proj["rank"][seg])
    seg, pixel, m2 = seg[sort], pixel[sort], m2[sort]
    mdx, mdy = mdx[sort], mdy[sort]

    gauss = np.exp(-0.5 * m2)
    alpha_raw = proj["opacities"][seg] * gauss
    clamped = alpha_raw > ALPHA_CLAMP
    alpha = np.where(clamped, ALPHA_CLAMP, alpha_raw)

    # exclusive per-pixel-segment prefix of log(1 - alpha) -> transmittance
    log1m = np.log1p(-alpha)
    cum = np.cumsum(log1m)
    seg_start = np.empty(len(pixel), dtype=bool)
    seg_start[0] = True
    np.not_equal(pixel[1:], pixel[:-1], out=seg_start[1:])
    start_idx = np.flatnonzero(seg_start)
    seg_id = np.cumsum(seg_start) - 1
    excl = cum - log1m
    T = np.exp(excl - excl[start_idx][seg_id])
    active = T >= TRANSMITTANCE_MIN

    # terminated pairs contribute exactly zero in both directions; dropping
    # them here (tails of per-pixel runs, contiguity preserved) keeps the
    # accumulation and the backward pass proportional to blended pairs only
    if not np.all(active):
        seg, pixel, gauss = seg[active], pixel[active], gauss[active]
        alpha, clamped, T = alpha[active], clamped[active], T[active]
        mdx, mdy = mdx[active], mdy[active]
        if len(pixel) == 0:
            return None
        seg_start = np.empty(len(pixel), dtype=bool)
        seg_start[0] = True
        np.not_equal(pixel[1:], pixel[:-1], out=seg_start[1:])
        start_idx = np.flatnonzero(seg_start)
        seg_id = np.cumsum(seg_start) - 1
    w = T * alpha

    return {
        "seg": seg,  # index into proj arrays
        "pixel": pixel,
        "gauss": gauss,
        "alpha": alpha,
        "clamped": clamped,
        "T": T,
        "w": w,
        "mdx": mdx,
        "mdy": mdy,
        "seg_id": seg_id,
        "start_idx": start_idx,
    }


def _accumulate(proj, pairs, K: Intrinsics) -> RenderOutput:
    hw = K.height * K.width
    w = pairs["w"]
    pixel = pairs["pixel"]
    seg = pairs["seg"]

    color = np.empty((hw, 3))
    for ch in range(3):
        color[:, ch] = np.bincount(pixel, weights=w * proj["colors"][seg, ch], minlength=hw)
    depth_raw = np.bincount(pixel, weights=w * proj["z"][seg], minlength=hw)
    alpha_accum = np.bincount(pixel, weights=w, minlength=hw)
    # depth is alpha-normalized so a single near-opaque primitive reads back
    # its own camera depth; color blends unnormalized
    depth = depth_raw / _depth_normalizer(alpha_accum)
    pairs["acc_raw"] = alpha_accum
    pairs["depth_norm"] = depth

    instance_map = np.full(hw, INSTANCE_NONE, dtype=np.int64)
    inst_pair = proj["instance_ids"][seg]
    fg = inst_pair >= 0
    if np.any(fg):
        inst_ids = np.unique(inst_pair[fg])  # ascending: argmax ties pick lower id
        col = np.searchsorted(inst_ids, inst_pair[fg])
        acc = np.bincount(
            pixel[fg] * len(inst_ids) + col, weights=w[fg], minlength=hw * len(inst_ids)
        ).reshape(hw, len(inst_ids))
        best = np.argmax(acc, axis=1)
        has_fg = acc[np.arange(hw), best] > 0.0
        covered = alpha_accum >= MASK_ALPHA_THRESHOLD
        sel = has_fg & covered
        instance_map[sel] = inst_ids[best[sel]]

    shape = (K.height, K.width)
    return RenderOutput(
        color=np.clip(color, 0.0, 1.0).reshape(K.height, K.width, 3),
        depth=depth.reshape(shape),
        alpha_accum=np.minimum(alpha_accum, 1.0).reshape(shape),
        instance_map=instance_map.reshape(shape),
    )


def _empty_output(K: Intrinsics) -> RenderOutput:
    return RenderOutput(
        color=np.zeros((K.height, K.width, 3)),
        depth=np.zeros((K.height, K.width)),
        alpha_accum=np.zeros((K.height, K.width)),
        instance_map=np.full((K.height, K.width), INSTANCE_NONE, dtype=np.int64),
    )


def _use_kernels() -> bool:
    import os

    from ._kernels import HAVE_NUMBA

    return HAVE_NUMBA and not os.environ.get("GSMIND_NO_NUMBA")


def _render_kernel(proj, K: Intrinsics):
    from ._kernels import forward_kernel

    inst = proj["instance_ids"]
    fg_ids = np.unique(inst[inst >= 0])  # ascending: argmax ties pick lower id
    inst_col = np.full(len(inst), -1, dtype=np.int64)
    if len(fg_ids):
        fg = inst >= 0
        inst_col[fg] = np.searchsorted(fg_ids, inst[fg])

    order = proj["order"]  # front-to-back gaussian order
    x0, x1, y0, y1 = proj["box"]
    color, depth, acc, inst_acc, T, n_seen, term_pos = forward_kernel(
        x0[order], x1[order], y0[order], y1[order],
        proj["mean_x"][order], proj["mean_y"][order],
        proj["inv_a"][order], proj["inv_b"][order], proj["inv_c"][order],
        proj["opacities"][order], proj["z"][order], proj["colors"][order],
        inst_col[order], len(fg_ids), K.width, K.height,
        CUTOFF_SIGMA**2, ALPHA_CLAMP, TRANSMITTANCE_MIN,
    )
    hw = K.height * K.width
    instance_map = np.full(hw, INSTANCE_NONE, dtype=np.int64)
    if len(fg_ids):
        best = np.argmax(inst_acc, axis=1)
        has_fg = inst_acc[np.arange(hw), best] > 0.0
        sel = has_fg & (acc >= MASK_ALPHA_THRESHOLD)
        instance_map[sel] = fg_ids[best[sel]]
    depth_norm = depth / _depth_normalizer(acc)
    out = RenderOutput(
        color=np.clip(color, 0.0, 1.0).reshape(K.height, K.width, 3),
        depth=depth_norm.reshape(K.height, K.width),
        alpha_accum=np.minimum(acc, 1.0).reshape(K.height, K.width),
        instance_map=instance_map.reshape(K.height, K.width),
    )
    kernel_ctx = {"order": order, "T": T, "n_seen": n_seen, "term_pos": term_pos,
                  "acc_raw": acc, "depth_norm": depth_norm}
    return out, kernel_ctx


def render_with_context(gaussians, pose: Pose, K: Intrinsics):
    """Render and keep enough state for a later backward pass."""
    field = _as_field(gaussians)
    proj = _project_for_render(field, pose, K)
    if proj is None:
        return _empty_output(K), None
    if _use_kernels():
        out, kernel_ctx = _render_kernel(proj, K)
        ctx = {"proj": proj, "kernel": kernel_ctx, "pose": pose, "K": K}
        return out, ctx
    pairs = _build_pairs(proj, K)
    if pairs is None:
        return _empty_output(K), None
    ctx = {"proj": proj, "pairs": pairs, "pose": pose, "K": K}
    return _accumulate(proj, pairs, K), ctx


def render_frame(gaussians, pose: Pose, K: Intrinsics) -> RenderOutput:
    """Render color, depth, accumulated alpha and instance-id planes."""
    return render_with_context(gaussians, pose, K)[0]


def oracle_render(gaussians, pose: Pose, K: Intrinsics) -> RenderOutput:
    """Reference renderer: every Gaussian against every pixel, no culling.

    Same contract as :func:`render_frame`; intentionally slow.
    """
    field = _as_field(gaussians)
    splats = field.to_splats(alive_only=True)
    out = _empty_output(K)

    projected = []
    for order_idx, g in enumerate(splats):
        try:
            mean2d, cov2d, depth = project_gaussian(g, pose, K)
        except Exception:
            continue  # behind the near plane contributes nothing
        if depth <= RENDER_NEAR:
            continue  # same near margin as render_frame
        inv_cov = np.linalg.inv(cov2d)
        iid = INSTANCE_NONE if g.instance_id is None else int(g.instance_id)
        projected.append((depth, order_idx, mean2d, inv_cov, g.opacity, g.color, iid))
    if not projected:
        return out
    projected.sort(key=lambda rec: (rec[0], rec[1]))

    for v in range(K.height):
        for u in range(K.width):
            T = 1.0
            col = np.zeros(3)
            dep = 0.0
            acc = 0.0
            per_instance: dict[int, float] = {}
            for depth, _, mean2d, inv_cov, opacity, color, iid in projected:
                if T < TRANSMITTANCE_MIN:
                    break
                d = np.array([u, v], dtype=np.float64) - mean2d
                m2 = d @ inv_cov @ d
                if m2 > CUTOFF_SIGMA**2:
                    continue
                alpha = min(ALPHA_CLAMP, opacity * np.exp(-0.5 * m2))
                wgt = T * alpha
                col += wgt * color
                dep += wgt * depth
                acc += wgt
                if iid != INSTANCE_NONE:
                    per_instance[iid] = per_instance.get(iid, 0.0) + wgt
                T *= 1.0 - alpha
            out.color[v, u] = np.clip(col, 0.0, 1.0)
            out.depth[v, u] = dep / np.sqrt(acc * acc + DEPTH_NORM_EPS**2)
            out.alpha_accum[v, u] = min(acc, 1.0)
            if acc >= MASK_ALPHA_THRESHOLD and per_instance:
                best = max(per_instance.items(), key=lambda kv: (kv[1], -kv[0]))
                if best[1] > 0.0:
                    out.instance_map[v, u] = best[0]
    return out


def instance_subfield(field: GaussianField, instance_id: int) -> GaussianField:
    """View of `field` with only one instance's Gaussians alive."""
    member = field.alive & (field.instance_ids == instance_id)
    return GaussianField(
        centers=field.centers,
        colors=field.colors,
        log_scales=field.log_scales,
        quats=field.quats,
        opacity_logits=field.opacity_logits,
        instance_ids=field.instance_ids,
        alive=member,
    )


def render_instance_mask(map_or_field, instance_id: int, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Binary mask of one instance: render only its Gaussians, alpha >= 0.5."""
    if hasattr(map_or_field, "gaussians"):
        if instance_id not in map_or_field.records:
            raise UnknownInstance(f"instance {instance_id}")
        field = map_or_field.gaussians
    else:
        field = _as_field(map_or_field)
        if not np.any(field.instance_ids == instance_id):
            raise UnknownInstance(f"instance {instance_id}")
    sub = instance_subfield(field, instance_id)
    if not np.any(sub.alive):
        return np.zeros((K.height, K.width), dtype=bool)
    out = render_frame(sub, pose, K)
    return out.alpha_accum >= MASK_ALPHA_THRESHOLD


def silhouette_mask(out: RenderOutput, observed_depth: np.ndarray,
                    alpha_threshold: float = SILHOUETTE_ALPHA) -> np.ndarray:
    """Pixels with valid rendered and observed depth and alpha above lambda8."""
    observed_depth = np.asarray(observed_depth, dtype=np.float64)
    if observed_depth.shape != out.depth.shape:
        raise ShapeMismatch(
            f"observed depth {observed_depth.shape} vs rendered {out.depth.shape}"
        )
    return (out.depth > 0) & (observed_depth > 0) & (out.alpha_accum > alpha_threshold)


def depth_to_normals(depth: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Unit normals from a depth map via central-difference tangents.

    Normals point toward the camera (a fronto-parallel plane yields
    (0, 0, -1)). Pixels whose center or any 4-neighbor has invalid depth, and
    the image border, get the zero vector.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    us = np.arange(W, dtype=np.float64)
    vs = np.arange(H, dtype=np.float64)
    ray_x = (us[None, :] - K.cx) / K.fx
    ray_y = (vs[:, None] - K.cy) / K.fy
    P = np.stack([depth * ray_x, depth * ray_y, depth], axis=-1)

    normals = np.zeros((H, W, 3))
    if H < 3 or W < 3:
        return normals
    tx = P[1:-1, 2:] - P[1:-1, :-2]
    ty = P[2:, 1:-1] - P[:-2, 1:-1]
    n = np.cross(ty, tx)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    valid = (
        (depth[1:-1, 1:-1] > 0)
        & (depth[1:-1, 2:] > 0)
        & (depth[1:-1, :-2] > 0)
        & (depth[2:, 1:-1] > 0)
        & (depth[:-2, 1:-1] > 0)
        & (norm[..., 0] > 1e-12)
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(norm > 1e-12, n / norm, 0.0)
    normals[1:-1, 1:-1] = np.where(valid[..., None], unit, 0.0)
    return normals
