"""Image quality metrics: Y / YUV(6:1:1) PSNR, multi-scale SSIM, and the
Bjontegaard rate delta between rate-quality curves.

MS-SSIM is written over the tape ops so the same code serves as an
evaluation metric (tape=None) and as a differentiable distortion term.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Node,
    add,
    clip_min,
    div,
    mean_all,
    mul,
    pow_const,
    reshape,
    sadd,
    smul,
    sub,
    value_of,
)

PSNR_CAP = 99.0
GAUSS_WINDOW = 11
GAUSS_SIGMA = 1.5
MS_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CS_FLOOR = 1e-6  # keeps fractional powers defined if contrast goes negative

# BT.709 full-range RGB -> YUV; U/V are zero-centered difference channels
_YUV = np.array(
    [
        [0.2126, 0.7152, 0.0722],
        [-0.2126 / 1.8556, -0.7152 / 1.8556, (1.0 - 0.0722) / 1.8556],
        [(1.0 - 0.2126) / 1.5748, -0.7152 / 1.5748, -0.0722 / 1.5748],
    ]
)


def rgb_to_yuv(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ _YUV.T


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for signals on [0,1]; capped so identical inputs read 99."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def psnr_y(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return psnr(rgb_to_yuv(a)[..., 0], rgb_to_yuv(b)[..., 0])


def yuv_psnr_611(a: np.ndarray, b: np.ndarray) -> float:
    """(6 PSNR_Y + PSNR_U + PSNR_V) / 8, each channel capped separately."""
    a, b = _check_pair(a, b)
    ya, yb = rgb_to_yuv(a), rgb_to_yuv(b)
    parts = [psnr(ya[..., c], yb[..., c]) for c in range(3)]
    return (6.0 * parts[0] + parts[1] + parts[2]) / 8.0


# ---------------------------------------------------------------------------
# MS-SSIM


def gaussian_window(n: int = GAUSS_WINDOW, sigma: float = GAUSS_SIGMA) -> np.ndarray:
    k = np.arange(n) - (n - 1) / 2.0
    g = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return g / g.sum()


def corr1d_valid(tape, x, g: np.ndarray, axis: int) -> Node:
    """Valid-mode correlation with a 1D window along a spatial axis of (H,W,C)."""
    xv = value_of(x)
    n = g.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xv, n, axis=axis)
    out = Node(np.tensordot(win, g, axes=([win.ndim - 1], [0])))
    if tape is not None and isinstance(x, Node):
        def bw():
            gx = np.zeros_like(xv)
            span = out.value.shape[axis]
            sl = [slice(None)] * xv.ndim
            for k in range(n):
                sl[axis] = slice(k, k + span)
                gx[tuple(sl)] += g[k] * out.grad
            x.accumulate(gx)
        tape.record(out, bw)
    return out


def blur2(tape, x, g: np.ndarray) -> Node:
    return corr1d_valid(tape, corr1d_valid(tape, x, g, 0), g, 1)


def avg_pool2(tape, x) -> Node:
    """2x2 average pooling; odd trailing rows/columns are dropped."""
    xv = value_of(x)
    h2, w2 = xv.shape[0] // 2, xv.shape[1] // 2
    xc = xv[: 2 * h2, : 2 * w2]
    out = Node(0.25 * (xc[0::2, 0::2] + xc[1::2, 0::2] + xc[0::2, 1::2] + xc[1::2, 1::2]))
    if tape is not None and isinstance(x, Node):
        def bw():
            gx = np.zeros_like(xv)
            for di in (0, 1):
                for dj in (0, 1):
                    gx[di : 2 * h2 : 2, dj : 2 * w2 : 2] += 0.25 * out.grad
            x.accumulate(gx)
        tape.record(out, bw)
    return out


def ssim_scale(tape, x, y, g: np.ndarray):
    """Mean SSIM and mean contrast-structure term at one scale."""
    mu_x = blur2(tape, x, g)
    mu_y = blur2(tape, y, g)
    mu_xx = mul(tape, mu_x, mu_x)
    mu_yy = mul(tape, mu_y, mu_y)
    mu_xy = mul(tape, mu_x, mu_y)
    sxx = sub(tape, blur2(tape, mul(tape, x, x), g), mu_xx)
    syy = sub(tape, blur2(tape, mul(tape, y, y), g), mu_yy)
    sxy = sub(tape, blur2(tape, mul(tape, x, y), g), mu_xy)
    l_num = sadd(tape, smul(tape, mu_xy, 2.0), SSIM_C1)
    l_den = sadd(tape, add(tape, mu_xx, mu_yy), SSIM_C1)
    cs_num = sadd(tape, smul(tape, sxy, 2.0), SSIM_C2)
    cs_den = sadd(tape, add(tape, sxx, syy), SSIM_C2)
    cs_map = div(tape, cs_num, cs_den)
    ssim_map = mul(tape, div(tape, l_num, l_den), cs_map)
    return mean_all(tape, ssim_map), mean_all(tape, cs_map)


def ms_ssim_scales(height: int, width: int) -> int:
    """Scale count such that the coarsest level still fits the 11-tap window."""
    s = 1
    size = min(height, width)
    while s < len(MS_WEIGHTS) and size // 2 >= GAUSS_WINDOW:
        s += 1
        size //= 2
    return s


def ms_ssim_op(tape, x, y) -> Node:
    """Multi-scale SSIM as a tape op; x, y are (H, W, C) on [0,1]."""
    xv, yv = value_of(x), value_of(y)
    if xv.shape != yv.shape:
        raise ValueError(f"image shapes differ: {xv.shape} vs {yv.shape}")
    if xv.ndim == 2:
        x = reshape(tape, x, (xv.shape[0], xv.shape[1], 1))
        y = reshape(tape, y, (xv.shape[0], xv.shape[1], 1))
        xv = value_of(x)
    if min(xv.shape[0], xv.shape[1]) < GAUSS_WINDOW:
        raise ValueError(f"image smaller than the {GAUSS_WINDOW}-tap SSIM window")
    n_scales = ms_ssim_scales(xv.shape[0], xv.shape[1])
    weights = MS_WEIGHTS[:n_scales] / MS_WEIGHTS[:n_scales].sum()
    g = gaussian_window()
    score = None
    for s in range(n_scales):
        mssim, mcs = ssim_scale(tape, x, y, g)
        term = mssim if s == n_scales - 1 else mcs
        term = pow_const(tape, clip_min(tape, term, CS_FLOOR), weights[s])
        score = term if score is None else mul(tape, score, term)
        if s != n_scales - 1:
            x = avg_pool2(tape, x)
            y = avg_pool2(tape, y)
    return score


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(ms_ssim_op(None, np.asarray(a, dtype=np.float64),
                            np.asarray(b, dtype=np.float64)).value)


# ---------------------------------------------------------------------------
# Bjontegaard rate delta


def _prep_curve(curve):
    pts = np.asarray(curve, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 4:
        raise ValueError("need at least 4 (rate, quality) points")
    order = np.argsort(pts[:, 1])
    rate, qual = pts[order, 0], pts[order, 1]
    if np.any(rate <= 0):
        raise ValueError("rates must be positive")
    if np.any(np.diff(qual) <= 0):
        raise ValueError("quality values must be distinct and monotone in rate")
    return rate, qual


def bd_rate(curve_a, curve_b) -> float:
    """Average percent rate difference of curve_b against curve_a at equal
    quality: cubic fit of log-rate over quality, integrated on the overlap."""
    ra, qa = _prep_curve(curve_a)
    rb, qb = _prep_curve(curve_b)
    lo = max(qa.min(), qb.min())
    hi = min(qa.max(), qb.max())
    if hi <= lo:
        raise ValueError("quality ranges do not overlap")
    pa = np.polyfit(qa, np.log(ra), 3)
    pb = np.polyfit(qb, np.log(rb), 3)
    ia, ib = np.polyint(pa), np.polyint(pb)
    int_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    int_b = np.polyval(ib, hi) - np.polyval(ib, lo)
    avg_diff = (int_b - int_a) / (hi - lo)
    return float((np.exp(avg_diff) - 1.0) * 100.0)
