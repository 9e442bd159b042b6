"""Compiled per-tile blending kernels.

Both kernels walk tiles serially and pixels in row order, so accumulation
order is fixed regardless of thread count. Splats arrive pre-sorted by
depth in a CSR layout (bin_starts / bin_members). Per pixel the loop
blends front to back and stops once transmittance drops below the early
exit threshold; rows whose exponent exceeds Q_CUTOFF contribute less than
exp(-40) and are skipped outright.
"""

import numpy as np
from numba import njit

Q_CUTOFF = 80.0


@njit(cache=True)
def forward_tiles(mean2d, a00, a01, a11, alpha, color, bg,
                  bin_starts, bin_members, n_tx, n_ty, width, height,
                  tile, early_exit_t, opacity_clamp, image, trans):
    for t in range(n_tx * n_ty):
        s0, s1 = bin_starts[t], bin_starts[t + 1]
        if s1 == s0:
            continue
        tx = t % n_tx
        ty = t // n_tx
        x_lo, y_lo = tx * tile, ty * tile
        x_hi = min(x_lo + tile, width)
        y_hi = min(y_lo + tile, height)
        for py in range(y_lo, y_hi):
            cy = py + 0.5
            for px in range(x_lo, x_hi):
                cx = px + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                for s in range(s0, s1):
                    i = bin_members[s]
                    dx = cx - mean2d[i, 0]
                    dy = cy - mean2d[i, 1]
                    q = dx * dx * a00[i] + 2.0 * dx * dy * a01[i] + dy * dy * a11[i]
                    if q > Q_CUTOFF:
                        continue
                    sigma = alpha[i] * np.exp(-0.5 * q)
                    if sigma > opacity_clamp:
                        sigma = opacity_clamp
                    w = sigma * T
                    r += w * color[i, 0]
                    g += w * color[i, 1]
                    b += w * color[i, 2]
                    T *= 1.0 - sigma
                    if T < early_exit_t:
                        break
                image[py, px, 0] = r + bg[0] * T
                image[py, px, 1] = g + bg[1] * T
                image[py, px, 2] = b + bg[2] * T
                trans[py, px] = T


@njit(cache=True)
def backward_tiles(mean2d, a00, a01, a11, alpha, color, bg,
                   bin_starts, bin_members, n_tx, n_ty, width, height,
                   tile, early_exit_t, opacity_clamp, max_members,
                   grad_image, g_mean2d, g_cov00, g_cov01, g_cov11,
                   g_alpha, g_color):
    # Per-pixel scratch: the forward pass records each blended row so the
    # reverse pass can rebuild suffix sums without a second exp().
    idx_buf = np.empty(max_members, dtype=np.int64)
    raw_buf = np.empty(max_members)
    sigma_buf = np.empty(max_members)
    tb_buf = np.empty(max_members)
    for t in range(n_tx * n_ty):
        s0, s1 = bin_starts[t], bin_starts[t + 1]
        if s1 == s0:
            continue
        tx = t % n_tx
        ty = t // n_tx
        x_lo, y_lo = tx * tile, ty * tile
        x_hi = min(x_lo + tile, width)
        y_hi = min(y_lo + tile, height)
        for py in range(y_lo, y_hi):
            cy = py + 0.5
            for px in range(x_lo, x_hi):
                cx = px + 0.5
                T = 1.0
                count = 0
                for s in range(s0, s1):
                    i = bin_members[s]
                    dx = cx - mean2d[i, 0]
                    dy = cy - mean2d[i, 1]
                    q = dx * dx * a00[i] + 2.0 * dx * dy * a01[i] + dy * dy * a11[i]
                    if q > Q_CUTOFF:
                        continue
                    raw = alpha[i] * np.exp(-0.5 * q)
                    sigma = raw if raw < opacity_clamp else opacity_clamp
                    idx_buf[count] = i
                    raw_buf[count] = raw
                    sigma_buf[count] = sigma
                    tb_buf[count] = T
                    count += 1
                    T *= 1.0 - sigma
                    if T < early_exit_t:
                        break
                if count == 0:
                    continue
                T_final = T
                gp0 = grad_image[py, px, 0]
                gp1 = grad_image[py, px, 1]
                gp2 = grad_image[py, px, 2]
                gb = gp0 * bg[0] + gp1 * bg[1] + gp2 * bg[2]
                suffix = 0.0
                for j in range(count - 1, -1, -1):
                    i = idx_buf[j]
                    raw = raw_buf[j]
                    sigma = sigma_buf[j]
                    tb = tb_buf[j]
                    contrib = sigma * tb
                    g_color[i, 0] += contrib * gp0
                    g_color[i, 1] += contrib * gp1
                    g_color[i, 2] += contrib * gp2
                    gp_dot = (color[i, 0] * gp0 + color[i, 1] * gp1
                              + color[i, 2] * gp2)
                    u = gp_dot * tb - (suffix + gb * T_final) / (1.0 - sigma)
                    suffix += gp_dot * contrib
                    if raw >= opacity_clamp:
                        continue                # clamped: flat in raw
                    g_alpha[i] += u * raw / alpha[i]
                    e = -0.5 * u * raw
                    dx = cx - mean2d[i, 0]
                    dy = cy - mean2d[i, 1]
                    adx = a00[i] * dx + a01[i] * dy
                    ady = a01[i] * dx + a11[i] * dy
                    g_mean2d[i, 0] += -2.0 * e * adx
                    g_mean2d[i, 1] += -2.0 * e * ady
                    g_cov00[i] += -e * adx * adx
                    g_cov01[i] += -e * adx * ady
                    g_cov11[i] += -e * ady * ady
