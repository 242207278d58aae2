"""Numba kernels for ordered alpha compositing (forward + analytic backward).

Splats are swept in global depth order while a per-pixel transmittance
buffer advances, which is exactly per-pixel front-to-back over-compositing.
The backward kernel replays the identical traversal (same thresholds, same
order), so gradients match the forward discretization bit-for-bit and the
whole pass stays deterministic single-threaded.

Thresholds: Mahalanobis cutoff q > 18, effective-alpha skip below 1e-5,
alpha clamp at 0.995, transmittance early-out below 1e-4.
"""

import numpy as np
from numba import njit

Q_CUTOFF = 18.0
ALPHA_SKIP = 1e-5
ALPHA_CLAMP = 0.995
T_EARLY_OUT = 1e-4


@njit(cache=True)
def composite_forward(order, means, covs, colors, alphas, out, tbuf):
    H, W = tbuf.shape
    for oi in range(order.shape[0]):
        i = order[oi]
        a = covs[i, 0, 0]
        b = covs[i, 0, 1]
        c = covs[i, 1, 1]
        det = a * c - b * b
        if det <= 1e-12:
            continue
        ia = c / det
        ib = -b / det
        ic = a / det
        disc = 0.25 * (a - c) * (a - c) + b * b
        lam = 0.5 * (a + c) + np.sqrt(disc if disc > 0.0 else 0.0)
        r = np.sqrt(2.0 * Q_CUTOFF * lam)  # conservative bbox radius
        mx = means[i, 0]
        my = means[i, 1]
        x0 = int(np.floor(mx - r - 0.5))
        x1 = int(np.ceil(mx + r - 0.5))
        y0 = int(np.floor(my - r - 0.5))
        y1 = int(np.ceil(my + r - 0.5))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > W - 1:
            x1 = W - 1
        if y1 > H - 1:
            y1 = H - 1
        al = alphas[i]
        for y in range(y0, y1 + 1):
            py = y + 0.5 - my
            for x in range(x0, x1 + 1):
                t = tbuf[y, x]
                if t < T_EARLY_OUT:
                    continue
                px = x + 0.5 - mx
                q = ia * px * px + 2.0 * ib * px * py + ic * py * py
                if q > Q_CUTOFF or q < 0.0:
                    continue
                w = np.exp(-0.5 * q)
                ae = al * w
                if ae > ALPHA_CLAMP:
                    ae = ALPHA_CLAMP
                if ae < ALPHA_SKIP:
                    continue
                out[y, x, 0] += colors[i, 0] * ae * t
                out[y, x, 1] += colors[i, 1] * ae * t
                out[y, x, 2] += colors[i, 2] * ae * t
                tbuf[y, x] = t * (1.0 - ae)


@njit(cache=True)
def composite_backward(
    order,
    means,
    covs,
    colors,
    alphas,
    total_rgb,
    final_t,
    g_out,
    g_means,
    g_covs,
    g_colors,
    g_alphas,
    tbuf,
    prefix,
):
    H, W = tbuf.shape
    for oi in range(order.shape[0]):
        i = order[oi]
        a = covs[i, 0, 0]
        b = covs[i, 0, 1]
        c = covs[i, 1, 1]
        det = a * c - b * b
        if det <= 1e-12:
            continue
        ia = c / det
        ib = -b / det
        ic = a / det
        disc = 0.25 * (a - c) * (a - c) + b * b
        lam = 0.5 * (a + c) + np.sqrt(disc if disc > 0.0 else 0.0)
        r = np.sqrt(2.0 * Q_CUTOFF * lam)
        mx = means[i, 0]
        my = means[i, 1]
        x0 = int(np.floor(mx - r - 0.5))
        x1 = int(np.ceil(mx + r - 0.5))
        y0 = int(np.floor(my - r - 0.5))
        y1 = int(np.ceil(my + r - 0.5))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > W - 1:
            x1 = W - 1
        if y1 > H - 1:
            y1 = H - 1
        al = alphas[i]
        for y in range(y0, y1 + 1):
            py = y + 0.5 - my
            for x in range(x0, x1 + 1):
                t = tbuf[y, x]
                if t < T_EARLY_OUT:
                    continue
                px = x + 0.5 - mx
                q = ia * px * px + 2.0 * ib * px * py + ic * py * py
                if q > Q_CUTOFF or q < 0.0:
                    continue
                w = np.exp(-0.5 * q)
                ae = al * w
                clamped = ae > ALPHA_CLAMP
                if clamped:
                    ae = ALPHA_CLAMP
                if ae < ALPHA_SKIP:
                    continue
                one_m = 1.0 - ae
                ga = 0.0
                for ch in range(3):
                    contrib = colors[i, ch] * ae * t
                    suffix = total_rgb[y, x, ch] - prefix[y, x, ch] - contrib
                    g_rgb = g_out[y, x, ch]
                    g_colors[i, ch] += g_rgb * ae * t
                    ga += g_rgb * (colors[i, ch] * t - suffix / one_m)
                    prefix[y, x, ch] += contrib
                ga += g_out[y, x, 3] * final_t[y, x] / one_m
                if not clamped:
                    g_alphas[i] += ga * w
                    gq = -0.5 * w * (ga * al)
                    e0 = ia * px + ib * py
                    e1 = ib * px + ic * py
                    g_means[i, 0] += -2.0 * gq * e0
                    g_means[i, 1] += -2.0 * gq * e1
                    g_covs[i, 0, 0] += -gq * e0 * e0
                    g_covs[i, 0, 1] += -gq * e0 * e1
                    g_covs[i, 1, 0] += -gq * e0 * e1
                    g_covs[i, 1, 1] += -gq * e1 * e1
                tbuf[y, x] = t * one_m
