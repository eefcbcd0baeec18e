"""Fused numba kernels for the bandwidth-bound layers.

All loops run single-threaded in a fixed order with float64 accumulators,
so results are deterministic. Arrays are channels-last [B,H,W,C]; the inner
C loop auto-vectorizes.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def bn_stats(x):
    """Per-channel sum and sum of squares in float64."""
    b, h, w, c = x.shape
    s = np.zeros(c, dtype=np.float64)
    s2 = np.zeros(c, dtype=np.float64)
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                for k in range(c):
                    v = np.float64(x[bi, i, j, k])
                    s[k] += v
                    s2[k] += v * v
    return s, s2


@njit(cache=True)
def bn_apply(x, a, sh, out):
    """out = x * a[c] + sh[c]; the folded normalize-and-affine transform."""
    b, h, w, c = x.shape
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                for k in range(c):
                    out[bi, i, j, k] = x[bi, i, j, k] * a[k] + sh[k]


@njit(cache=True)
def bn_backward_sums(g, x, mean, inv_std):
    """Per-channel sum(g) and sum(g * xhat) in float64."""
    b, h, w, c = g.shape
    gsum = np.zeros(c, dtype=np.float64)
    gx = np.zeros(c, dtype=np.float64)
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                for k in range(c):
                    gv = np.float64(g[bi, i, j, k])
                    xh = np.float64((x[bi, i, j, k] - mean[k]) * inv_std[k])
                    gsum[k] += gv
                    gx[k] += gv * xh
    return gsum, gx


@njit(cache=True)
def bn_backward_dx(g, x, mean, inv_std, coef, gsum_n, gx_n):
    """In-place g <- coef[c] * (g - gsum_n[c] - xhat * gx_n[c])."""
    b, h, w, c = g.shape
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                for k in range(c):
                    xh = (x[bi, i, j, k] - mean[k]) * inv_std[k]
                    g[bi, i, j, k] = coef[k] * (g[bi, i, j, k] - gsum_n[k]
                                                - xh * gx_n[k])


@njit(cache=True)
def im2col(x, kh, kw, stride, pad, h_out, w_out, cols):
    """Gather [B,H,W,C] patches into rows [B*h_out*w_out, kh*kw*C];
    out-of-bounds taps (implicit zero padding) fill with zero."""
    b, h, w, c = x.shape
    for bi in range(b):
        for oi in range(h_out):
            for oj in range(w_out):
                row = (bi * h_out + oi) * w_out + oj
                base = 0
                for i in range(kh):
                    si = oi * stride + i - pad
                    for j in range(kw):
                        sj = oj * stride + j - pad
                        if 0 <= si < h and 0 <= sj < w:
                            for k in range(c):
                                cols[row, base + k] = x[bi, si, sj, k]
                        else:
                            for k in range(c):
                                cols[row, base + k] = 0.0
                        base += c
    return cols


@njit(cache=True)
def col2im(dcols, kh, kw, stride, pad, h_out, w_out, dx):
    """Overlap-add patch-row gradients back onto [B,H,W,C] (pre-zeroed dx)."""
    b, h, w, c = dx.shape
    for bi in range(b):
        for oi in range(h_out):
            for oj in range(w_out):
                row = (bi * h_out + oi) * w_out + oj
                base = 0
                for i in range(kh):
                    si = oi * stride + i - pad
                    for j in range(kw):
                        sj = oj * stride + j - pad
                        if 0 <= si < h and 0 <= sj < w:
                            for k in range(c):
                                dx[bi, si, sj, k] += dcols[row, base + k]
                        base += c
    return dx


@njit(cache=True)
def maxpool2x2(x, out, win):
    """2x2/stride-2 max pool; win records the flat window argmax (0..3),
    first maximum winning ties."""
    b, h2, w2, c = out.shape
    for bi in range(b):
        for i in range(h2):
            for j in range(w2):
                for k in range(c):
                    best = x[bi, 2 * i, 2 * j, k]
                    idx = np.uint8(0)
                    v = x[bi, 2 * i, 2 * j + 1, k]
                    if v > best:
                        best = v
                        idx = np.uint8(1)
                    v = x[bi, 2 * i + 1, 2 * j, k]
                    if v > best:
                        best = v
                        idx = np.uint8(2)
                    v = x[bi, 2 * i + 1, 2 * j + 1, k]
                    if v > best:
                        best = v
                        idx = np.uint8(3)
                    out[bi, i, j, k] = best
                    win[bi, i, j, k] = idx


@njit(cache=True)
def maxpool2x2_bwd(g, win, dx):
    """Scatter pooled gradients back to the winning positions (dx pre-zeroed)."""
    b, h2, w2, c = g.shape
    for bi in range(b):
        for i in range(h2):
            for j in range(w2):
                for k in range(c):
                    idx = win[bi, i, j, k]
                    dx[bi, 2 * i + idx // 2, 2 * j + idx % 2, k] = g[bi, i, j, k]


@njit(cache=True)
def relu_fwd(x, out):
    flat_x = x.reshape(-1)
    flat_o = out.reshape(-1)
    for i in range(flat_x.size):
        v = flat_x[i]
        flat_o[i] = v if v > 0 else 0.0


@njit(cache=True)
def relu_bwd(g, out):
    """In-place g <- g where out > 0 else 0."""
    flat_g = g.reshape(-1)
    flat_o = out.reshape(-1)
    for i in range(flat_g.size):
        if flat_o[i] <= 0:
            flat_g[i] = 0.0
