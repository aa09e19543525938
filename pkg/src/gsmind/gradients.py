"""Analytic gradients of the splatting forward pass.

Given upstream gradients of a scalar loss with respect to the rendered color
and depth planes, backpropagates through alpha blending, the pinhole
projection (including the Jacobian's own dependence on the camera-space
center), and covariance composition, down to the five Gaussian parameter
groups and an optional 6-dof camera perturbation.

The pose tangent convention matches :meth:`gsmind.geometry.Pose.perturbed`:
R' = R exp(skew(omega)), t' = t + R v, gradients taken at (v, omega) = 0.

Blending backward per pixel, with w_j = T_j alpha_j and r_j the response
c_j . gC + d_j * gD:

    dL/dalpha_j = T_j r_j - (sum_{l>j} w_l r_l) / (1 - alpha_j)

The suffix sum runs over the same depth-sorted pair sequence as the forward
pass, so termination and clamping behave identically in both directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidGradient
from .geometry import Intrinsics, Pose
from .renderer import _as_field, render_with_context
from .splats import quats_to_rotations


@dataclass
class GradientSet:
    d_centers: np.ndarray  # (N, 3)
    d_colors: np.ndarray  # (N, 3)
    d_log_scales: np.ndarray  # (N, 3)
    d_quats: np.ndarray  # (N, 4)
    d_opacity_logits: np.ndarray  # (N,)
    d_pose: np.ndarray | None = None  # (6,) = (v, omega)

    @classmethod
    def zeros(cls, n: int, want_pose: bool) -> "GradientSet":
        return cls(
            d_centers=np.zeros((n, 3)),
            d_colors=np.zeros((n, 3)),
            d_log_scales=np.zeros((n, 3)),
            d_quats=np.zeros((n, 4)),
            d_opacity_logits=np.zeros(n),
            d_pose=np.zeros(6) if want_pose else None,
        )


def _quat_grad_from_rotation_grad(G: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Contract dL/dR with the partials of R(q) over unit quaternions.

    Explicit expansion of sum_ij G_ij dR_ij/dq_k for the standard
    (w, x, y, z) rotation-matrix polynomial.
    """
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    g00, g01, g02 = G[:, 0, 0], G[:, 0, 1], G[:, 0, 2]
    g10, g11, g12 = G[:, 1, 0], G[:, 1, 1], G[:, 1, 2]
    g20, g21, g22 = G[:, 2, 0], G[:, 2, 1], G[:, 2, 2]
    gw = 2.0 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2.0 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12
                + z * g20 + w * g21 - 2 * x * g22)
    gy = 2.0 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12
                - w * g20 + z * g21 - 2 * y * g22)
    gz = 2.0 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11
                + y * g12 + x * g20 + y * g21)
    return np.stack([gw, gx, gy, gz], axis=1)


def _pair_backward_numpy(proj, pairs, gC_flat, gD_flat, gW_flat):
    """Blending backward over the numpy pair arrays."""
    seg = pairs["seg"]
    pixel = pairs["pixel"]
    w = pairs["w"]
    alpha = pairs["alpha"]
    T = pairs["T"]
    m = len(proj["ids"])

    pc = proj["colors"][seg]
    gc_px = gC_flat[pixel]
    gd_px = gD_flat[pixel]
    r = pc[:, 0] * gc_px[:, 0] + pc[:, 1] * gc_px[:, 1] + pc[:, 2] * gc_px[:, 2]
    r += proj["z"][seg] * gd_px + gW_flat[pixel]
    wr = w * r
    cum = np.cumsum(wr)
    seg_id = pairs["seg_id"]
    start_idx = pairs["start_idx"]
    incl = cum - (cum - wr)[start_idx][seg_id]
    ends = np.concatenate([start_idx[1:] - 1, [len(pixel) - 1]])
    suffix = incl[ends][seg_id] - incl
    d_alpha = np.where(pairs["clamped"], 0.0, T * r - suffix / (1.0 - alpha))

    gauss = pairs["gauss"]
    aG = d_alpha * proj["opacities"][seg] * gauss  # dL/d(-0.5 m2)
    mdx = pairs["mdx"]
    mdy = pairs["mdy"]

    g_mean2d = np.stack(
        [
            np.bincount(seg, weights=aG * mdx, minlength=m),
            np.bincount(seg, weights=aG * mdy, minlength=m),
        ],
        axis=1,
    )
    g_cov2d = np.empty((m, 2, 2))
    g_cov2d[:, 0, 0] = np.bincount(seg, weights=0.5 * aG * mdx * mdx, minlength=m)
    g_cov2d[:, 1, 1] = np.bincount(seg, weights=0.5 * aG * mdy * mdy, minlength=m)
    g_cov2d[:, 0, 1] = np.bincount(seg, weights=0.5 * aG * mdx * mdy, minlength=m)
    g_cov2d[:, 1, 0] = g_cov2d[:, 0, 1]

    g_color = np.stack(
        [np.bincount(seg, weights=w * gc_px[:, ch], minlength=m) for ch in range(3)],
        axis=1,
    )
    g_zblend = np.bincount(seg, weights=w * gd_px, minlength=m)
    d_opac = np.bincount(seg, weights=d_alpha * gauss, minlength=m)
    return g_mean2d, g_cov2d, g_color, g_zblend, d_opac


def _pair_backward_kernel(proj, kernel_ctx, K, gC_flat, gD_flat, gW_flat):
    """Blending backward via the numba kernel; results in proj order."""
    from ._kernels import backward_kernel
    from .renderer import ALPHA_CLAMP, CUTOFF_SIGMA, TRANSMITTANCE_MIN

    order = kernel_ctx["order"]
    x0, x1, y0, y1 = proj["box"]
    g_color_o, g_z_o, d_opac_o, g_mean_o, g_cov_o = backward_kernel(
        x0[order], x1[order], y0[order], y1[order],
        proj["mean_x"][order], proj["mean_y"][order],
        proj["inv_a"][order], proj["inv_b"][order], proj["inv_c"][order],
        proj["opacities"][order], proj["z"][order], proj["colors"][order],
        K.width, K.height, CUTOFF_SIGMA**2, ALPHA_CLAMP, TRANSMITTANCE_MIN,
        kernel_ctx["T"], kernel_ctx["n_seen"], kernel_ctx["term_pos"],
        gC_flat, gD_flat, gW_flat,
    )
    m = len(proj["ids"])
    inv = np.empty(m, dtype=np.int64)
    inv[order] = np.arange(m)
    g_mean2d = g_mean_o[inv]
    g_color = g_color_o[inv]
    g_zblend = g_z_o[inv]
    d_opac = d_opac_o[inv]
    cov3 = g_cov_o[inv]
    g_cov2d = np.empty((m, 2, 2))
    g_cov2d[:, 0, 0] = cov3[:, 0]
    g_cov2d[:, 0, 1] = cov3[:, 1]
    g_cov2d[:, 1, 0] = cov3[:, 1]
    g_cov2d[:, 1, 1] = cov3[:, 2]
    return g_mean2d, g_cov2d, g_color, g_zblend, d_opac


def backward_from_context(
    field,
    ctx,
    loss_color_grad: np.ndarray,
    loss_depth_grad: np.ndarray,
    want_pose_grad: bool = False,
) -> GradientSet:
    """Backward pass reusing the state of a previous forward render."""
    field = _as_field(field)
    out = GradientSet.zeros(len(field), want_pose_grad)
    if ctx is None:
        return out

    K: Intrinsics = ctx["K"]
    pose: Pose = ctx["pose"]
    proj = ctx["proj"]

    gC = np.asarray(loss_color_grad, dtype=np.float64)
    gD = np.asarray(loss_depth_grad, dtype=np.float64)
    if gC.shape != (K.height, K.width, 3) or gD.shape != (K.height, K.width):
        raise InvalidGradient("upstream gradient shape mismatch")
    if not (np.all(np.isfinite(gC)) and np.all(np.isfinite(gD))):
        raise InvalidGradient("non-finite upstream gradients")
    gC_flat = gC.reshape(-1, 3)
    # the rendered depth plane is alpha-normalized: D = S_d / S_w. Chain the
    # upstream through the quotient: per-pair response gains d_j * gD / S_w
    # plus a pair-independent term -gD * D / S_w on the blend weight.
    from .renderer import _depth_normalizer

    stash = ctx["kernel"] if "kernel" in ctx else ctx["pairs"]
    acc = stash["acc_raw"]
    depth_norm = stash["depth_norm"]
    M = _depth_normalizer(acc)
    gD_raw = gD.reshape(-1)
    gD_flat = gD_raw / M
    # d(1/M)/dS_w = -S_w / M^3, so the blend weight carries -gD D S_w / M^2
    gW_flat = -gD_flat * depth_norm * (acc / M)

    if "kernel" in ctx:
        g_mean2d, g_cov2d, g_color, g_zblend, d_opac = _pair_backward_kernel(
            proj, ctx["kernel"], K, gC_flat, gD_flat, gW_flat
        )
    else:
        g_mean2d, g_cov2d, g_color, g_zblend, d_opac = _pair_backward_numpy(
            proj, ctx["pairs"], gC_flat, gD_flat, gW_flat
        )
    g_logit = d_opac * proj["opacities"] * (1.0 - proj["opacities"])

    # projection backward
    m = len(proj["ids"])
    z = proj["z"]
    p_cam = proj["p_cam"]
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * p_cam[:, 0] / z**2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * p_cam[:, 1] / z**2

    Jt = np.transpose(J, (0, 2, 1))
    g_pcam = np.matmul(Jt, g_mean2d[..., None])[..., 0]
    g_pcam[:, 2] += g_zblend
    g_cov_cam = np.matmul(np.matmul(Jt, g_cov2d), J)
    g_J = 2.0 * np.matmul(np.matmul(g_cov2d, J), proj["cov_cam"])
    fz2x = K.fx / z**2
    fz2y = K.fy / z**2
    g_pcam[:, 0] += -g_J[:, 0, 2] * fz2x
    g_pcam[:, 1] += -g_J[:, 1, 2] * fz2y
    g_pcam[:, 2] += (
        -g_J[:, 0, 0] * fz2x
        - g_J[:, 1, 1] * fz2y
        + g_J[:, 0, 2] * 2.0 * K.fx * p_cam[:, 0] / z**3
        + g_J[:, 1, 2] * 2.0 * K.fy * p_cam[:, 1] / z**3
    )

    R = pose.rotation
    g_center = g_pcam @ R.T
    g_cov_world = np.matmul(np.matmul(R[None], g_cov_cam), R.T[None])

    # covariance composition backward: Sigma = Rq diag(e^{2s}) Rq^T
    ids = proj["ids"]
    quats_raw = field.quats[ids]
    norms = np.linalg.norm(quats_raw, axis=1, keepdims=True)
    quats_unit = quats_raw / norms
    Rq = quats_to_rotations(quats_raw)
    e2s = np.exp(2.0 * field.log_scales[ids])
    tmp = np.matmul(g_cov_world, Rq)  # (M, 3, 3)
    g_scale = 2.0 * e2s * np.einsum("nik,nik->nk", Rq, tmp)
    g_Rq = 2.0 * tmp * e2s[:, None, :]
    g_qhat = _quat_grad_from_rotation_grad(g_Rq, quats_unit)
    # through normalization: (I - qq^T) / |q|
    g_quat = (
        g_qhat - quats_unit * np.einsum("nk,nk->n", quats_unit, g_qhat)[:, None]
    ) / norms

    out.d_centers[ids] = g_center
    out.d_colors[ids] = g_color
    out.d_log_scales[ids] = g_scale
    out.d_quats[ids] = g_quat
    out.d_opacity_logits[ids] = g_logit

    if want_pose_grad:
        g_v = -g_pcam.sum(axis=0)
        g_w = np.cross(g_pcam, p_cam).sum(axis=0)
        # Sigma_cam(omega) = exp(-skew(omega)) Sigma_cam exp(skew(omega))
        S = proj["cov_cam"]
        E = np.zeros((3, 3, 3))
        E[0] = [[0, 0, 0], [0, 0, -1], [0, 1, 0]]
        E[1] = [[0, 0, 1], [0, 0, 0], [-1, 0, 0]]
        E[2] = [[0, -1, 0], [1, 0, 0], [0, 0, 0]]
        dS = np.einsum("nab,kbc->nkac", S, E) - np.einsum("kab,nbc->nkac", E, S)
        g_w += np.einsum("nij,nkij->k", g_cov_cam, dS)
        out.d_pose = np.concatenate([g_v, g_w])

    return out


def render_gradients(
    gaussians,
    pose: Pose,
    K: Intrinsics,
    loss_color_grad: np.ndarray,
    loss_depth_grad: np.ndarray,
    want_pose_grad: bool = False,
) -> GradientSet:
    """Render internally, then backpropagate image-space loss gradients."""
    field = _as_field(gaussians)
    _, ctx = render_with_context(field, pose, K)
    return backward_from_context(field, ctx, loss_color_grad, loss_depth_grad, want_pose_grad)
