"""Hot per-pixel kernels behind the metrics, in numba and numpy flavours.

Both flavours implement the same contracts bit-for-bit on integer outputs
and to rounding on float outputs; ``tests/test_kernels.py`` checks this and
``benchmarks/bench_metrics.py`` times them.
"""
from __future__ import annotations

import numpy as np

from .._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# nearest foreground pixel (exact Euclidean, ties -> smallest raster index)
# ---------------------------------------------------------------------------


def boundary_foreground(gt: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour in the background.

    Only these can be the nearest foreground pixel of a background pixel.
    """
    fg = gt.astype(bool)
    bg = ~fg
    touch = np.zeros_like(fg)
    touch[1:, :] |= bg[:-1, :]
    touch[:-1, :] |= bg[1:, :]
    touch[:, 1:] |= bg[:, :-1]
    touch[:, :-1] |= bg[:, 1:]
    return fg & touch


@njit
def _nearest_fg_nb(fg, cand_r, cand_c):
    h, w = fg.shape
    dist = np.zeros((h, w), dtype=np.float64)
    idx = np.empty((h, w), dtype=np.int64)
    n = cand_r.shape[0]
    for i in range(h):
        for j in range(w):
            if fg[i, j]:
                idx[i, j] = i * w + j
                continue
            best = -1
            best_k = 0
            for k in range(n):
                dr = cand_r[k] - i
                dc = cand_c[k] - j
                d2 = dr * dr + dc * dc
                if best < 0 or d2 < best:
                    best = d2
                    best_k = k
            dist[i, j] = np.sqrt(best)
            idx[i, j] = cand_r[best_k] * w + cand_c[best_k]
    return dist, idx


def _nearest_fg_np(fg, cand_r, cand_c, chunk_elems: int = 1 << 22):
    h, w = fg.shape
    dist = np.zeros((h, w), dtype=np.float64)
    idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    bg_r, bg_c = np.nonzero(~fg)
    if bg_r.size == 0:
        return dist, idx
    rows = max(1, chunk_elems // max(1, cand_r.size))
    best_d2 = np.empty(bg_r.size, dtype=np.int64)
    best_k = np.empty(bg_r.size, dtype=np.int64)
    for s in range(0, bg_r.size, rows):
        dr = cand_r[None, :] - bg_r[s:s + rows, None]
        dc = cand_c[None, :] - bg_c[s:s + rows, None]
        d2 = dr * dr + dc * dc
        k = np.argmin(d2, axis=1)  # first minimum -> smallest raster index
        best_k[s:s + rows] = k
        best_d2[s:s + rows] = d2[np.arange(k.size), k]
    dist[bg_r, bg_c] = np.sqrt(best_d2)
    idx[bg_r, bg_c] = cand_r[best_k] * w + cand_c[best_k]
    return dist, idx


def nearest_foreground(gt: np.ndarray, use_numba: bool | None = None):
    """Distance to, and flat index of, the nearest foreground pixel.

    Foreground pixels map to themselves at distance 0.  ``gt`` must contain
    at least one foreground pixel.
    """
    fg = np.ascontiguousarray(gt, dtype=bool)
    if not fg.any():
        raise ValueError("nearest_foreground needs a non-empty foreground")
    cand_r, cand_c = np.nonzero(boundary_foreground(fg))
    cand_r = cand_r.astype(np.int64)
    cand_c = cand_c.astype(np.int64)
    if USE_NUMBA if use_numba is None else use_numba:
        return _nearest_fg_nb(fg, cand_r, cand_c)
    return _nearest_fg_np(fg, cand_r, cand_c)


# ---------------------------------------------------------------------------
# 2-D correlation with zero padding (odd square kernel)
# ---------------------------------------------------------------------------


@njit
def _filter2d_zero_nb(img, kernel):
    h, w = img.shape
    kh, kw = kernel.shape
    rh = kh // 2
    rw = kw // 2
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(kh):
                ii = i + a - rh
                if ii < 0 or ii >= h:
                    continue
                for b in range(kw):
                    jj = j + b - rw
                    if jj < 0 or jj >= w:
                        continue
                    acc += kernel[a, b] * img[ii, jj]
            out[i, j] = acc
    return out


def _filter2d_zero_np(img, kernel):
    h, w = img.shape
    kh, kw = kernel.shape
    rh, rw = kh // 2, kw // 2
    padded = np.pad(img, ((rh, rh), (rw, rw)))
    out = np.zeros((h, w), dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            out += kernel[a, b] * padded[a:a + h, b:b + w]
    return out


def filter2d_zero(img: np.ndarray, kernel: np.ndarray, use_numba: bool | None = None) -> np.ndarray:
    img = np.ascontiguousarray(img, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ValueError("kernel sides must be odd")
    if USE_NUMBA if use_numba is None else use_numba:
        return _filter2d_zero_nb(img, kernel)
    return _filter2d_zero_np(img, kernel)


# ---------------------------------------------------------------------------
# per-threshold confusion counts
# ---------------------------------------------------------------------------


@njit
def _threshold_counts_nb(prob, gt, thresholds):
    n_thr = thresholds.shape[0]
    hist_fg = np.zeros(n_thr + 1, dtype=np.int64)
    hist_all = np.zeros(n_thr + 1, dtype=np.int64)
    flat_p = prob.ravel()
    flat_g = gt.ravel()
    for k in range(flat_p.shape[0]):
        lvl = np.searchsorted(thresholds, flat_p[k], side="right")
        hist_all[lvl] += 1
        if flat_g[k]:
            hist_fg[lvl] += 1
    tp = np.zeros(n_thr, dtype=np.int64)
    pp = np.zeros(n_thr, dtype=np.int64)
    acc_fg = 0
    acc_all = 0
    # pixel is predicted foreground at threshold k iff its level > k
    for k in range(n_thr - 1, -1, -1):
        acc_fg += hist_fg[k + 1]
        acc_all += hist_all[k + 1]
        tp[k] = acc_fg
        pp[k] = acc_all
    return tp, pp


def _threshold_counts_np(prob, gt, thresholds):
    n_thr = thresholds.shape[0]
    lvl = np.searchsorted(thresholds, prob.ravel(), side="right")
    hist_all = np.bincount(lvl, minlength=n_thr + 1)
    hist_fg = np.bincount(lvl[gt.ravel()], minlength=n_thr + 1)
    pp = np.cumsum(hist_all[::-1])[::-1][1:]
    tp = np.cumsum(hist_fg[::-1])[::-1][1:]
    return tp.astype(np.int64), pp.astype(np.int64)


def threshold_counts(prob: np.ndarray, gt: np.ndarray, thresholds: np.ndarray,
                     use_numba: bool | None = None):
    """For each threshold ``thr_k`` (ascending), count true positives and
    predicted positives of the binarisation ``prob >= thr_k``."""
    prob = np.ascontiguousarray(prob, dtype=np.float64)
    gt = np.ascontiguousarray(gt, dtype=bool)
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)
    if USE_NUMBA if use_numba is None else use_numba:
        return _threshold_counts_nb(prob, gt, thresholds)
    return _threshold_counts_np(prob, gt, thresholds)
