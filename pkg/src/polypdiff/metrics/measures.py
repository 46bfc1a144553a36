"""Per-frame segmentation measures: Dice, S-measure, mean E-measure, weighted F.

Predictions are probability maps in [0, 1]; ground truth is binary.  Every
measure returns a float in [0, 1].
"""
from __future__ import annotations

import numpy as np

from ._kernels import filter2d_zero, nearest_foreground, threshold_counts

EPS = np.spacing(1.0)
# bin midpoints: strictly inside (0, 1), so a binary map binarises to itself at every threshold
E_THRESHOLDS = (np.arange(256, dtype=np.float64) + 0.5) / 256.0


def _prepare(prob, gt):
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt)
    if prob.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {prob.shape} vs gt {gt.shape}")
    return prob, gt.astype(bool)


def _clip01(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def dice(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    pred = pred.astype(bool)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return _clip01(2.0 * np.logical_and(pred, gt).sum() / denom)


# ---------------------------------------------------------------------------
# S-measure
# ---------------------------------------------------------------------------


def _object_similarity(values: np.ndarray) -> float:
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _object_score(prob, gt) -> float:
    u = gt.mean()
    fg = _object_similarity(prob[gt])
    bg = _object_similarity(1.0 - prob[~gt])
    return u * fg + (1.0 - u) * bg


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x = pred.mean()
    y = gt.mean()
    dof = max(n - 1, 1)
    # constant blocks get exactly zero variance so the degenerate branch
    # below does not hinge on summation-order rounding of the mean
    sx = 0.0 if pred.min() == pred.max() else ((pred - x) ** 2).sum() / dof
    sy = 0.0 if gt.min() == gt.max() else ((gt - y) ** 2).sum() / dof
    sxy = ((pred - x) * (gt - y)).sum() / dof
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    rows, cols = np.nonzero(gt)
    return int(np.round(cols.mean())) + 1, int(np.round(rows.mean())) + 1


def _region_score(prob, gt) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    g = gt.astype(np.float64)
    area = h * w
    w1 = x * y / area
    w2 = y * (w - x) / area
    w3 = (h - y) * x / area
    w4 = 1.0 - w1 - w2 - w3
    quads = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
             (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    score = 0.0
    for wt, (rs, cs) in zip((w1, w2, w3, w4), quads):
        if wt > 0:
            score += wt * _ssim(prob[rs, cs], g[rs, cs])
    return score


def s_measure(prob, gt, alpha: float = 0.5) -> float:
    """Structure measure: ``alpha * object + (1 - alpha) * region``."""
    prob, gt = _prepare(prob, gt)
    frac = gt.mean()
    if frac == 0:
        return _clip01(1.0 - prob.mean())
    if frac == 1:
        return _clip01(prob.mean())
    return _clip01(alpha * _object_score(prob, gt) + (1.0 - alpha) * _region_score(prob, gt))


# ---------------------------------------------------------------------------
# E-measure
# ---------------------------------------------------------------------------


def _enhanced(h_p: float, h_g: float) -> float:
    phi = 2.0 * h_p * h_g / (h_p * h_p + h_g * h_g + EPS)
    return (phi + 1.0) ** 2 / 4.0


def e_measure_curve(prob, gt, thresholds: np.ndarray = E_THRESHOLDS) -> np.ndarray:
    """Enhanced-alignment score of ``prob >= thr`` for every threshold."""
    prob, gt = _prepare(prob, gt)
    n = gt.size
    n_g = int(gt.sum())
    tp, pp = threshold_counts(prob, gt, thresholds)
    if n_g == 0:
        return (n - pp) / n
    if n_g == n:
        return pp / n
    mu_g = n_g / n
    scores = np.empty(len(thresholds))
    for k in range(len(thresholds)):
        t_p, p_p = int(tp[k]), int(pp[k])
        fp = p_p - t_p
        fn = n_g - t_p
        tn = n - n_g - fp
        mu_p = p_p / n
        total = (t_p * _enhanced(1 - mu_p, 1 - mu_g) + fp * _enhanced(1 - mu_p, -mu_g)
                 + fn * _enhanced(-mu_p, 1 - mu_g) + tn * _enhanced(-mu_p, -mu_g))
        scores[k] = total / n
    return scores


def e_measure_mean(prob, gt, thresholds: np.ndarray = E_THRESHOLDS) -> float:
    """Mean enhanced-alignment measure over 256 thresholds."""
    return _clip01(e_measure_curve(prob, gt, thresholds).mean())


# ---------------------------------------------------------------------------
# weighted F-measure
# ---------------------------------------------------------------------------


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    k[k < np.finfo(k.dtype).eps * k.max()] = 0
    return k / k.sum()


def weighted_fbeta(prob, gt, beta_sq: float = 1.0, sigma: float = 5.0,
                   kernel_size: int = 7, attenuation: float = 5.0) -> float:
    """Weighted F-measure with dependency-smoothed, distance-weighted errors."""
    prob, gt = _prepare(prob, gt)
    if not gt.any():
        return 1.0 if not prob.any() else 0.0
    g = gt.astype(np.float64)
    err = np.abs(prob - g)
    dist, idx = nearest_foreground(gt)
    # background errors borrow the error of their nearest foreground pixel
    err_t = err.ravel()[idx]
    ea = filter2d_zero(err_t, gaussian_kernel(kernel_size, sigma))
    min_e = np.where(gt & (ea < err), ea, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / attenuation * dist))
    ew = min_e * importance
    tp_w = g.sum() - ew[gt].sum()
    fp_w = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tp_w / (tp_w + fp_w + EPS)
    q = (1.0 + beta_sq) * recall * precision / (recall + beta_sq * precision + EPS)
    return _clip01(q)
