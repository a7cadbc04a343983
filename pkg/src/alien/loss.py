"""Masked multi-feature detection loss and its gradient.

``J = sum_{m,n} lambda_m * f_m(1{y0n}) * g_m(y_mn, yhat_mn)`` where feature 0
(existence) uses binary cross-entropy at every anchor (``f_0 = 1``) and the
regression features use squared error only at anchors that hold a target.
Masked entries are removed by selection, never multiplied by zero, so
placeholders (even NaN) at empty anchors cannot reach the arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import FEATURES, TruthVector

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambdas: tuple[float, ...] = (1.0,) * len(FEATURES)

    def __post_init__(self):
        if any(l < 0 for l in self.lambdas):
            raise ValueError("loss weights must be non-negative")
        if self.lambdas[0] <= 0:
            raise ValueError("the existence weight must be positive")

    def array(self) -> np.ndarray:
        return np.asarray(self.lambdas, dtype=np.float64)


@dataclass
class LossBreakdown:
    total: float
    per_feature: np.ndarray
    per_anchor_existence: np.ndarray = field(repr=False)


def _blocks(pred, truth_values, mask):
    n = mask.shape[-1]
    p = np.asarray(pred, dtype=np.float64).reshape(mask.shape[:-1] + (n, -1))
    y = np.asarray(truth_values, dtype=np.float64).reshape(p.shape)
    return p, y


def _terms(p, y, mask):
    pe = np.clip(p[..., 0], EPS, 1.0 - EPS)
    ye = y[..., 0]
    bce = -(ye * np.log(pe) + (1.0 - ye) * np.log(1.0 - pe))
    # selection: only anchors holding a target contribute regression terms
    sq = (y[mask][:, 1:] - p[mask][:, 1:]) ** 2
    return pe, bce, sq


def eval_loss(pred, truth: TruthVector, weights: LossWeights = LossWeights()) -> LossBreakdown:
    mask = np.asarray(truth.mask, dtype=bool)
    p, y = _blocks(pred, truth.values, mask)
    lam = weights.array()
    _, bce, sq = _terms(p, y, mask)
    per_anchor = lam[0] * bce
    per_feature = np.empty(len(lam))
    per_feature[0] = per_anchor.sum()
    per_feature[1:] = lam[1:] * sq.sum(axis=0)
    return LossBreakdown(float(per_feature.sum()), per_feature, per_anchor)


def loss_gradient(pred, truth: TruthVector, weights: LossWeights = LossWeights()) -> np.ndarray:
    """dJ/dpred, same flat layout as ``pred``."""
    mask = np.asarray(truth.mask, dtype=bool)
    p, y = _blocks(pred, truth.values, mask)
    lam = weights.array()
    return _gradient(p, y, mask, lam).reshape(np.shape(pred))


def _gradient(p, y, mask, lam):
    pe = np.clip(p[..., 0], EPS, 1.0 - EPS)
    grad = np.zeros_like(p)
    grad[..., 0] = lam[0] * (pe - y[..., 0]) / (pe * (1.0 - pe))
    grad[mask, 1:] = 2.0 * lam[1:] * (p[mask][:, 1:] - y[mask][:, 1:])
    return grad


def batch_loss(pred: np.ndarray, values: np.ndarray, masks: np.ndarray, weights: LossWeights = LossWeights()):
    """Batch-mean loss over ``B`` cells.

    Returns ``(mean total, mean per-feature (M,), gradient (B, N*M))`` where the
    gradient is already divided by the batch size.
    """
    masks = np.asarray(masks, dtype=bool)
    b = masks.shape[0]
    p, y = _blocks(pred, values, masks)
    lam = weights.array()
    _, bce, sq = _terms(p, y, masks)
    per_feature = np.empty(len(lam))
    per_feature[0] = lam[0] * bce.sum()
    per_feature[1:] = lam[1:] * sq.sum(axis=0)
    per_feature /= b
    grad = _gradient(p, y, masks, lam) / b
    return float(per_feature.sum()), per_feature, grad.reshape(b, -1)
