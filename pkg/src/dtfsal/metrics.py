"""Evaluation metrics for gaze prediction: CC, NSS, AUC-Judd, SIM.

All functions take plain numpy maps. CC and SIM compare a prediction with
a ground-truth density; NSS and AUC-Judd score the prediction at binary
fixation locations. Degenerate inputs (constant maps, empty fixation sets)
raise instead of returning NaN.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def validate_fixation_map(fix: np.ndarray) -> np.ndarray:
    fix = np.asarray(fix)
    vals = np.unique(fix)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError("fixation map must be binary")
    return fix.astype(bool)


def gaussian_density(fixations: np.ndarray, sigma: float) -> np.ndarray:
    """Sum-normalized Gaussian-blurred fixation histogram."""
    fix = np.asarray(fixations, dtype=np.float64)
    if fix.sum() <= 0:
        raise ValueError("cannot build a density from an empty fixation map")
    dens = ndimage.gaussian_filter(fix, sigma=sigma, mode="constant")
    return dens / dens.sum()


def cc(gt: np.ndarray, pred: np.ndarray) -> float:
    """Pearson correlation coefficient over pixels."""
    a = np.asarray(gt, dtype=np.float64).ravel()
    b = np.asarray(pred, dtype=np.float64).ravel()
    if a.std() == 0.0 or b.std() == 0.0:
        raise ValueError("cc undefined for a constant map")
    a = a - a.mean()
    b = b - b.mean()
    return float((a * b).mean() / (a.std() * b.std()))


def nss(pred: np.ndarray, fixations: np.ndarray) -> float:
    """Mean z-scored saliency at fixated pixels."""
    fix = validate_fixation_map(fixations)
    if not fix.any():
        raise ValueError("nss needs at least one fixation")
    p = np.asarray(pred, dtype=np.float64)
    std = p.std()
    if std == 0.0:
        raise ValueError("nss undefined for a constant prediction")
    z = (p - p.mean()) / std
    return float(z[fix].mean())


def auc_judd(pred: np.ndarray, fixations: np.ndarray) -> float:
    """ROC area with thresholds swept over the saliency values at fixations.

    True-positive rate counts fixations with saliency >= threshold; false
    positives count the remaining pixels the same way. The (0,0) and (1,1)
    endpoints close the curve and trapezoidal integration gives tied values
    half weight, so a constant map scores exactly 0.5.
    """
    fix = validate_fixation_map(fixations)
    sal = np.asarray(pred, dtype=np.float64).ravel()
    f = fix.ravel()
    n_fix = int(f.sum())
    n_rest = f.size - n_fix
    if n_fix == 0 or n_rest == 0:
        raise ValueError("auc_judd needs both fixated and non-fixated pixels")
    fix_vals = sal[f]
    rest_vals = sal[~f]
    points = [(0.0, 0.0), (1.0, 1.0)]
    for tau in np.unique(fix_vals):
        tpr = np.count_nonzero(fix_vals >= tau) / n_fix
        fpr = np.count_nonzero(rest_vals >= tau) / n_rest
        points.append((fpr, tpr))
    points.sort()
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    return float(np.trapezoid(ys, xs))


def sim(gt: np.ndarray, pred: np.ndarray) -> float:
    """Histogram intersection of two sum-normalized densities."""
    a = np.asarray(gt, dtype=np.float64)
    b = np.asarray(pred, dtype=np.float64)
    for name, m in (("gt", a), ("pred", b)):
        if abs(m.sum() - 1.0) > 1e-6 or np.any(m < 0):
            raise ValueError(f"sim expects sum-normalized nonnegative maps ({name} sums to {m.sum():.6g})")
    return float(np.minimum(a, b).sum())


METRIC_NAMES = ("cc", "nss", "auc_judd", "sim")


def evaluate(pred: np.ndarray, gt_density: np.ndarray, fixations: np.ndarray) -> dict[str, float]:
    """All four metrics for one prediction; pred is sum-normalized for SIM."""
    p = np.asarray(pred, dtype=np.float64)
    p_norm = p / p.sum() if p.sum() > 0 else p
    return {
        "cc": cc(gt_density, p),
        "nss": nss(p, fixations),
        "auc_judd": auc_judd(p, fixations),
        "sim": sim(gt_density / gt_density.sum(), p_norm),
    }
