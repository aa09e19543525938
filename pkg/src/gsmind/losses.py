"""Loss terms for map optimization: photometric, depth, normal, scale, SSIM.

Every term exposes a plain evaluation plus a `_grad` variant returning the
gradient with respect to the rendered quantity, so the optimizer can chain
them into the splatting backward pass. SSIM uses an 11x11 Gaussian window
(sigma 1.5) on valid (fully interior) positions with C1=0.01^2, C2=0.03^2 on
unit dynamic range; for inputs smaller than the window the window shrinks to
the largest odd size that fits.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch
from .geometry import Intrinsics
from .renderer import depth_to_normals

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

LAMBDA_RGB_SSIM = 0.2  # lambda4
LAMBDA_DEPTH = 0.1  # lambda5
LAMBDA_NORMAL = 0.1  # lambda6
LAMBDA_SCALE = 1.0  # lambda7
R_ALLOW = 10.0


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k1 = np.exp(-0.5 * (x / sigma) ** 2)
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


def _window_size(H: int, W: int) -> int:
    size = min(SSIM_WINDOW, H, W)
    return size if size % 2 == 1 else size - 1


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """'valid'-mode correlation with a small kernel."""
    k = kernel.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("ijab,ab->ij", win, kernel)


def _filter_valid_adjoint(up: np.ndarray, kernel: np.ndarray, shape: tuple) -> np.ndarray:
    """Adjoint of `_filter_valid`: scatter the upstream field back."""
    k = kernel.shape[0]
    out = np.zeros(shape)
    hv, wv = up.shape
    for a in range(k):
        for b in range(k):
            out[a : a + hv, b : b + wv] += kernel[a, b] * up
    return out


def _ssim_channel(x: np.ndarray, y: np.ndarray, kernel: np.ndarray, want_grad: bool):
    mu_x = _filter_valid(x, kernel)
    mu_y = _filter_valid(y, kernel)
    m_xx = _filter_valid(x * x, kernel)
    m_yy = _filter_valid(y * y, kernel)
    m_xy = _filter_valid(x * y, kernel)
    var_x = m_xx - mu_x**2
    var_y = m_yy - mu_y**2
    cov = m_xy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * cov + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    if not want_grad:
        return float(s.mean()), None

    u = np.full_like(s, 1.0 / s.size)
    g_a1 = u * a2 / (b1 * b2)
    g_a2 = u * a1 / (b1 * b2)
    g_b1 = -u * s / b1
    g_b2 = -u * s / b2
    g_cov = 2 * g_a2
    g_var_x = g_b2
    g_mu_x = 2 * mu_y * g_a1 + 2 * mu_x * g_b1 - 2 * mu_x * g_var_x - mu_y * g_cov
    g_mxx = g_var_x
    g_mxy = g_cov
    dx = (
        _filter_valid_adjoint(g_mu_x, kernel, x.shape)
        + 2 * x * _filter_valid_adjoint(g_mxx, kernel, x.shape)
        + y * _filter_valid_adjoint(g_mxy, kernel, x.shape)
    )
    return float(s.mean()), dx


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity in [-1, 1]; channels averaged for color images."""
    value, _ = ssim_with_grad(a, b, want_grad=False)
    return value


def ssim_with_grad(a: np.ndarray, b: np.ndarray, want_grad: bool = True):
    """SSIM plus its gradient with respect to `a`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim inputs {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
        squeeze = True
    else:
        squeeze = False
    H, W, C = a.shape
    kernel = gaussian_kernel(_window_size(H, W), SSIM_SIGMA)
    values = []
    grad = np.zeros_like(a) if want_grad else None
    for ch in range(C):
        v, g = _ssim_channel(a[..., ch], b[..., ch], kernel, want_grad)
        values.append(v)
        if want_grad:
            grad[..., ch] = g / C
    value = float(np.mean(values))
    if want_grad and squeeze:
        grad = grad[..., 0]
    return value, grad


def loss_rgb(rendered: np.ndarray, target: np.ndarray, lam: float = LAMBDA_RGB_SSIM) -> float:
    value, _ = loss_rgb_grad(rendered, target, lam, want_grad=False)
    return value


def loss_rgb_grad(rendered: np.ndarray, target: np.ndarray,
                  lam: float = LAMBDA_RGB_SSIM, want_grad: bool = True):
    """(1 - lam) L1 + lam (1 - SSIM), with gradient w.r.t. the render."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatch(f"rgb shapes {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    s, ds = ssim_with_grad(rendered, target, want_grad)
    value = (1.0 - lam) * l1 + lam * (1.0 - s)
    if not want_grad:
        return value, None
    grad = (1.0 - lam) * np.sign(diff) / diff.size - lam * ds
    return value, grad


def loss_depth(rendered: np.ndarray, target: np.ndarray) -> float:
    value, _ = loss_depth_grad(rendered, target, want_grad=False)
    return value


def loss_depth_grad(rendered: np.ndarray, target: np.ndarray, want_grad: bool = True):
    """Masked L1 over pixels where both depths are positive."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatch(f"depth shapes {rendered.shape} vs {target.shape}")
    valid = (rendered > 0) & (target > 0)
    n = int(np.count_nonzero(valid))
    if n == 0:
        return 0.0, (np.zeros_like(rendered) if want_grad else None)
    diff = rendered - target
    value = float(np.sum(np.abs(diff[valid])) / n)
    if not want_grad:
        return value, None
    grad = np.where(valid, np.sign(diff) / n, 0.0)
    return value, grad


def loss_normal(rendered_depth: np.ndarray, target_depth: np.ndarray, K: Intrinsics) -> float:
    value, _ = loss_normal_grad(rendered_depth, target_depth, K, want_grad=False)
    return value


def loss_normal_grad(rendered_depth: np.ndarray, target_depth: np.ndarray,
                     K: Intrinsics, want_grad: bool = True):
    """Mean angular discrepancy 1 - <N_hat, N> over mutually valid normals.

    The gradient flows through the central-difference tangents and the cross
    product back to the rendered depth; the validity mask is held constant.
    """
    rendered_depth = np.asarray(rendered_depth, dtype=np.float64)
    target_depth = np.asarray(target_depth, dtype=np.float64)
    if rendered_depth.shape != target_depth.shape:
        raise ShapeMismatch("depth shapes differ")
    n_hat = depth_to_normals(rendered_depth, K)
    n_ref = depth_to_normals(target_depth, K)
    valid = (np.linalg.norm(n_hat, axis=-1) > 0) & (np.linalg.norm(n_ref, axis=-1) > 0)
    count = int(np.count_nonzero(valid))
    if count == 0:
        return 0.0, (np.zeros_like(rendered_depth) if want_grad else None)
    dots = np.einsum("ijc,ijc->ij", n_hat, n_ref)
    value = float(np.sum(1.0 - dots[valid]) / count)
    if not want_grad:
        return value, None

    H, W = rendered_depth.shape
    g_unit = np.where(valid[..., None], -n_ref / count, 0.0)

    # recompute the raw cross products on the interior grid
    us = np.arange(W, dtype=np.float64)
    vs = np.arange(H, dtype=np.float64)
    ray = np.empty((H, W, 3))
    ray[..., 0] = (us[None, :] - K.cx) / K.fx
    ray[..., 1] = (vs[:, None] - K.cy) / K.fy
    ray[..., 2] = 1.0
    P = rendered_depth[..., None] * ray
    tx = P[1:-1, 2:] - P[1:-1, :-2]
    ty = P[2:, 1:-1] - P[:-2, 1:-1]
    n_raw = np.cross(ty, tx)
    norm = np.linalg.norm(n_raw, axis=-1, keepdims=True)
    safe = np.maximum(norm, 1e-300)
    unit = n_raw / safe

    gu = g_unit[1:-1, 1:-1]
    # through normalization: (I - u u^T) / |n|
    g_raw = (gu - unit * np.einsum("ijc,ijc->ij", unit, gu)[..., None]) / safe
    g_raw = np.where(valid[1:-1, 1:-1, None], g_raw, 0.0)
    # n = ty x tx:  g_ty = tx x g_n, g_tx = g_n x ty
    g_ty = np.cross(tx, g_raw)
    g_tx = np.cross(g_raw, ty)

    g_P = np.zeros((H, W, 3))
    g_P[1:-1, 2:] += g_tx
    g_P[1:-1, :-2] -= g_tx
    g_P[2:, 1:-1] += g_ty
    g_P[:-2, 1:-1] -= g_ty
    grad = np.einsum("ijc,ijc->ij", g_P, ray)
    return value, grad


def loss_scale(log_scales: np.ndarray, alive: np.ndarray | None = None,
               r_allow: float = R_ALLOW) -> float:
    value, _ = loss_scale_grad(log_scales, alive, r_allow, want_grad=False)
    return value


def loss_scale_grad(log_scales: np.ndarray, alive: np.ndarray | None = None,
                    r_allow: float = R_ALLOW, want_grad: bool = True):
    """Hinge on log anisotropy, averaged over the violating subset only."""
    s = np.asarray(log_scales, dtype=np.float64).reshape(-1, 3)
    mask = np.ones(len(s), dtype=bool) if alive is None else np.asarray(alive, dtype=bool)
    hinge = s.max(axis=1) - s.min(axis=1) - np.log(r_allow)
    violating = mask & (hinge > 0)
    count = int(np.count_nonzero(violating))
    grad = np.zeros_like(s) if want_grad else None
    if count == 0:
        return 0.0, grad
    value = float(hinge[violating].sum() / count)
    if want_grad:
        rows = np.flatnonzero(violating)
        grad[rows, s[rows].argmax(axis=1)] += 1.0 / count
        grad[rows, s[rows].argmin(axis=1)] -= 1.0 / count
    return value, grad


def total_loss(l_rgb: float, l_depth: float, l_normal: float, l_scale: float,
               lam_depth: float = LAMBDA_DEPTH, lam_normal: float = LAMBDA_NORMAL,
               lam_scale: float = LAMBDA_SCALE) -> float:
    """L_rgb + 0.1 L_depth + 0.1 L_normal + 1.0 L_scale."""
    return l_rgb + lam_depth * l_depth + lam_normal * l_normal + lam_scale * l_scale


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio on unit dynamic range, capped at 99 dB."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 10 ** (-cap / 10.0):
        return cap
    return float(10.0 * np.log10(1.0 / mse))
