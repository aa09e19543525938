"""Numba fast path for the splatting forward and backward passes.

Same math as the vectorized numpy pair pipeline in renderer.py/gradients.py,
executed gaussian-major with per-pixel transmittance state so terminated
pixels cost nothing and no pair arrays are materialized. The numpy path
remains the reference; tests assert the two agree.

Backward reconstructs each pixel's blend sequence back to front: the actives
form a prefix of the per-pixel pair list (transmittance never increases), so
the forward pass records, per pixel, the total bbox-pair count and the
position where termination first hit.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except Exception:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


_BIG = np.iinfo(np.int64).max


@njit(cache=True, fastmath=False)
def forward_kernel(x0, x1, y0, y1, mean_x, mean_y, inv_a, inv_b, inv_c,
                   opac, z, colors, inst_col, n_inst, W, H,
                   cutoff2, alpha_clamp, t_min):
    hw = H * W
    color = np.zeros((hw, 3))
    depth = np.zeros(hw)
    acc = np.zeros(hw)
    T = np.ones(hw)
    inst_acc = np.zeros((hw, max(n_inst, 1)))
    n_seen = np.zeros(hw, dtype=np.int64)
    term_pos = np.full(hw, _BIG, dtype=np.int64)

    for g in range(len(x0)):  # already front-to-back
        mx = mean_x[g]
        my = mean_y[g]
        ia = inv_a[g]
        ib = inv_b[g]
        ic = inv_c[g]
        og = opac[g]
        zg = z[g]
        c0 = colors[g, 0]
        c1 = colors[g, 1]
        c2 = colors[g, 2]
        col = inst_col[g]
        for py in range(y0[g], y1[g] + 1):
            base = py * W
            for px in range(x0[g], x1[g] + 1):
                p = base + px
                pos = n_seen[p]
                n_seen[p] = pos + 1
                Tp = T[p]
                if Tp < t_min:
                    if pos < term_pos[p]:
                        term_pos[p] = pos
                    continue
                dx = px - mx
                dy = py - my
                mdx = ia * dx + ib * dy
                mdy = ib * dx + ic * dy
                m2 = dx * mdx + dy * mdy
                if m2 > cutoff2:
                    continue
                a = og * np.exp(-0.5 * m2)
                if a > alpha_clamp:
                    a = alpha_clamp
                w = Tp * a
                color[p, 0] += w * c0
                color[p, 1] += w * c1
                color[p, 2] += w * c2
                depth[p] += w * zg
                acc[p] += w
                if col >= 0:
                    inst_acc[p, col] += w
                T[p] = Tp * (1.0 - a)
    return color, depth, acc, inst_acc, T, n_seen, term_pos


@njit(cache=True, fastmath=False)
def backward_kernel(x0, x1, y0, y1, mean_x, mean_y, inv_a, inv_b, inv_c,
                    opac, z, colors, W, H, cutoff2, alpha_clamp, t_min,
                    T_final, n_seen, term_pos, gC, gD, gW):
    m = len(x0)
    g_color = np.zeros((m, 3))
    g_z = np.zeros(m)
    d_opac = np.zeros(m)
    g_mean = np.zeros((m, 2))
    g_cov = np.zeros((m, 3))  # (xx, xy, yy) of dL/dcov2d

    hw = H * W
    T_cur = T_final.copy()
    S = np.zeros(hw)  # suffix of w * r per pixel
    back_cnt = np.zeros(hw, dtype=np.int64)

    for g in range(m - 1, -1, -1):  # back to front
        mx = mean_x[g]
        my = mean_y[g]
        ia = inv_a[g]
        ib = inv_b[g]
        ic = inv_c[g]
        og = opac[g]
        zg = z[g]
        c0 = colors[g, 0]
        c1 = colors[g, 1]
        c2 = colors[g, 2]
        for py in range(y0[g], y1[g] + 1):
            base = py * W
            for px in range(x0[g], x1[g] + 1):
                p = base + px
                back_cnt[p] += 1
                pos = n_seen[p] - back_cnt[p]
                if pos >= term_pos[p]:
                    continue  # was skipped by termination in the forward pass
                dx = px - mx
                dy = py - my
                mdx = ia * dx + ib * dy
                mdy = ib * dx + ic * dy
                m2 = dx * mdx + dy * mdy
                if m2 > cutoff2:
                    continue
                gauss = np.exp(-0.5 * m2)
                a_raw = og * gauss
                clamped = a_raw > alpha_clamp
                a = alpha_clamp if clamped else a_raw
                T_before = T_cur[p] / (1.0 - a)
                T_cur[p] = T_before
                r = c0 * gC[p, 0] + c1 * gC[p, 1] + c2 * gC[p, 2] + zg * gD[p] + gW[p]
                w = T_before * a
                g_color[g, 0] += w * gC[p, 0]
                g_color[g, 1] += w * gC[p, 1]
                g_color[g, 2] += w * gC[p, 2]
                g_z[g] += w * gD[p]
                if not clamped:
                    d_alpha = T_before * r - S[p] / (1.0 - a)
                    d_opac[g] += d_alpha * gauss
                    aG = d_alpha * og * gauss
                    g_mean[g, 0] += aG * mdx
                    g_mean[g, 1] += aG * mdy
                    g_cov[g, 0] += 0.5 * aG * mdx * mdx
                    g_cov[g, 1] += 0.5 * aG * mdx * mdy
                    g_cov[g, 2] += 0.5 * aG * mdy * mdy
                S[p] += w * r
    return g_color, g_z, d_opac, g_mean, g_cov
