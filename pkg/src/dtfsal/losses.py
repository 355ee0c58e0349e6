"""Training objective: epsilon-regularized KL plus Pearson correlation.

The divergence keeps its epsilon both inside the log and in the
denominator, matching the training recipe this model uses rather than the
textbook definition; a textbook mode exists for comparison. Both terms are
differentiable through the tape.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, as_tensor

KL_EPS = 1e-7
_NORM_ATOL = 1e-6


def sum_normalize(t: Tensor) -> Tensor:
    total = t.sum()
    if total.item() <= 0:
        raise ValueError("cannot sum-normalize a map with non-positive mass")
    return t / total


def _require_normalized(arr: np.ndarray, name: str) -> None:
    s = float(arr.sum())
    if abs(s - 1.0) > _NORM_ATOL:
        raise ValueError(f"{name} must be sum-normalized (sums to {s:.6g})")
    if np.any(arr < 0):
        raise ValueError(f"{name} must be nonnegative")


def kl_div(gt, pred, eps: float = KL_EPS, textbook: bool = False) -> Tensor:
    """sum(gt * log(eps + gt / (pred + eps))) over pixels.

    Both maps must be sum-normalized. ``textbook=True`` switches to
    sum(gt * log((gt + eps) / (pred + eps))), the conventional divergence.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    gt = as_tensor(gt)
    pred = pred if isinstance(pred, Tensor) else as_tensor(pred)
    _require_normalized(gt.data, "gt")
    _require_normalized(pred.data, "pred")
    if textbook:
        ratio = (gt + eps) / (pred + eps)
        return (gt * ops.log(ratio)).sum()
    ratio = gt / (pred + eps)
    return (gt * ops.log(ratio + eps)).sum()


def cc(gt, pred) -> Tensor:
    """Pearson correlation over pixels; errors out on a constant map."""
    gt = as_tensor(gt)
    pred = pred if isinstance(pred, Tensor) else as_tensor(pred)
    if float(gt.data.std()) == 0.0:
        raise ValueError("cc undefined: gt map is constant")
    if float(pred.data.std()) == 0.0:
        raise ValueError("cc undefined: pred map is constant")
    a = gt - gt.mean()
    b = pred - pred.mean()
    cov = (a * b).mean()
    denom = ops.sqrt((a * a).mean()) * ops.sqrt((b * b).mean())
    return cov / denom


def composite_loss(gt, pred, lam_kl: float = 1.0, lam_cc: float = -1.0, eps: float = KL_EPS, textbook: bool = False) -> Tensor:
    """lam_kl * KL + lam_cc * CC on sum-normalized maps."""
    loss = kl_div(gt, pred, eps=eps, textbook=textbook) * lam_kl
    if lam_cc != 0.0:
        loss = loss + cc(gt, pred) * lam_cc
    return loss


def prediction_loss(gt_density: np.ndarray, raw_pred: Tensor, lam_kl: float = 1.0, lam_cc: float = -1.0, eps: float = KL_EPS, textbook: bool = False) -> Tensor:
    """Composite loss of an unnormalized positive map against a density."""
    return composite_loss(
        Tensor(np.asarray(gt_density, dtype=raw_pred.data.dtype)),
        sum_normalize(raw_pred),
        lam_kl=lam_kl,
        lam_cc=lam_cc,
        eps=eps,
        textbook=textbook,
    )
