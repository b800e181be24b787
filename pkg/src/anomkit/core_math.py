"""Shared numerical primitives and the segmentation losses.

Everything here is a pure function on immutable numpy inputs, safe to call
concurrently. The three losses follow the exact formulas used to train the
localization decoder:

    ce    = -sum_i log(p_i)                      (token-level, p_i = prob of true class)
    focal = -(1/n) sum_i (1 - p_i)^gamma log(p_i)
    dice  = -sum(y * yhat) / (sum(y^2) + sum(yhat^2))
    total = alpha * ce + beta * focal + delta * dice

Note the dice term keeps the single-numerator form (no factor 2, no
smoothing), so a perfect overlap scores -0.5 rather than -1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Probabilities are clamped to this floor inside log terms so saturated
# predictions keep losses finite.
LOG_EPS = 1e-12

# Vectors with norm at or below this are treated as degenerate (zero).
NORM_EPS = 1e-12


class GridShapeError(ValueError):
    """A grid operand has invalid or mismatched dimensions."""


@dataclass(frozen=True)
class LossWeights:
    """Coefficients balancing the combined loss plus the focal exponent.

    alpha scales the cross-entropy term, beta the focal term, delta the
    dice term. All three default to 1; gamma defaults to 2.
    """

    alpha: float = 1.0
    beta: float = 1.0
    delta: float = 1.0
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.delta) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


def as_grid(values) -> np.ndarray:
    """Validate and return a finite 2-d float64 grid (H, W)."""
    grid = np.asarray(values, dtype=np.float64)
    if grid.ndim != 2:
        raise GridShapeError(f"expected a 2-d grid, got shape {grid.shape}")
    if grid.shape[0] < 1 or grid.shape[1] < 1:
        raise GridShapeError(f"grid dimensions must be >= 1, got {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise GridShapeError("grid contains non-finite values")
    return grid


@lru_cache(maxsize=64)
def interp_matrix(out_len: int, src_len: int) -> np.ndarray:
    """1-d linear interpolation matrix A (out_len x src_len), align-corners.

    Target index t samples source position t * (src_len - 1) / (out_len - 1),
    so both endpoints are preserved exactly. Rows are convex weights. The
    returned array is cached and read-only.
    """
    if out_len < 1 or src_len < 1:
        raise GridShapeError("interpolation lengths must be >= 1")
    mat = np.zeros((out_len, src_len), dtype=np.float64)
    if out_len == 1:
        mat[0, 0] = 1.0
        return _frozen(mat)
    pos = np.arange(out_len, dtype=np.float64) * (src_len - 1) / (out_len - 1)
    lo = np.minimum(np.floor(pos).astype(np.intp), max(src_len - 2, 0))
    frac = pos - lo
    rows = np.arange(out_len)
    mat[rows, lo] = 1.0 - frac
    if src_len > 1:
        mat[rows, lo + 1] += frac
    return _frozen(mat)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def bilinear_upsample(src, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resample a grid up to (out_h, out_w), align-corners.

    Upsampling to the source dimensions returns the grid bit-identically.
    Output values are clipped to [min(src), max(src)], which also makes
    constant grids exactly constant.
    """
    grid = as_grid(src)
    if out_h < 1 or out_w < 1:
        raise GridShapeError(f"target dimensions must be >= 1, got {(out_h, out_w)}")
    if out_h < grid.shape[0] or out_w < grid.shape[1]:
        raise GridShapeError(
            f"target {(out_h, out_w)} smaller than source {grid.shape}"
        )
    rows = interp_matrix(out_h, grid.shape[0])
    cols = interp_matrix(out_w, grid.shape[1])
    out = rows @ grid @ cols.T
    np.clip(out, grid.min(), grid.max(), out=out)
    return out


def l2_normalize(vectors, axis: int = -1, return_degenerate: bool = False):
    """Scale vectors to unit Euclidean norm along ``axis``.

    Vectors with norm <= NORM_EPS are returned as zeros. When
    ``return_degenerate`` is set, a boolean mask of those rows is returned
    alongside the result.
    """
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot normalize an empty vector")
    norms = np.sqrt(np.sum(arr * arr, axis=axis, keepdims=True))
    degenerate = norms <= NORM_EPS
    safe = np.where(degenerate, 1.0, norms)
    out = np.where(degenerate, 0.0, arr / safe)
    if return_degenerate:
        return out, np.squeeze(degenerate, axis=axis)
    return out


def softmax_pair(logit_normal: float, logit_abnormal: float) -> tuple[float, float]:
    """Two-class softmax with max-subtraction for stability.

    Returns (p_normal, p_abnormal); the pair sums to 1 up to 1 ulp.
    """
    a = float(logit_normal)
    b = float(logit_abnormal)
    if not (np.isfinite(a) and np.isfinite(b)):
        raise ValueError("softmax_pair requires finite logits")
    m = max(a, b)
    ea = np.exp(a - m)
    eb = np.exp(b - m)
    denom = ea + eb
    return float(ea / denom), float(eb / denom)


def _clamped_log(p: np.ndarray, what: str) -> np.ndarray:
    if np.any(p <= 0.0):
        warnings.warn(
            f"{what}: probability 0 clamped to {LOG_EPS:g} in log term",
            RuntimeWarning,
            stacklevel=3,
        )
    return np.log(np.maximum(p, LOG_EPS))


def cross_entropy_loss(predicted_probs, true_labels) -> float:
    """Token-level negative log-likelihood, -sum_i log(p_i).

    ``predicted_probs`` holds one row of class probabilities per token;
    ``true_labels`` gives each token's true class index. Zero probability
    at a true label is clamped to LOG_EPS with a warning.
    """
    probs = np.asarray(predicted_probs, dtype=np.float64)
    labels = np.asarray(true_labels)
    if probs.ndim != 2:
        raise ValueError(
            f"predicted_probs must be (tokens, classes), got shape {probs.shape}"
        )
    if labels.ndim != 1 or labels.shape[0] != probs.shape[0]:
        raise ValueError("true_labels length must equal the token count")
    if np.any(probs < 0.0) or np.any(probs > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise ValueError("labels index outside the class dimension")
    picked = probs[np.arange(probs.shape[0]), labels.astype(np.intp)]
    return float(-np.sum(_clamped_log(picked, "cross_entropy_loss")))


def focal_loss(p_positive, gamma: float = 2.0) -> float:
    """Focal loss -(1/n) sum (1 - p)^gamma log(p) over a grid.

    ``p_positive`` holds each pixel's predicted probability of its true
    class. gamma=0 reduces to the mean cross-entropy over the grid.
    """
    p = as_grid(p_positive)
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    logs = _clamped_log(p, "focal_loss")
    weights = np.power(1.0 - p, gamma) if gamma != 0 else 1.0
    return float(-np.mean(weights * logs))


def dice_loss(pred, truth) -> float:
    """Dice-style overlap loss -sum(y*yhat) / (sum(y^2) + sum(yhat^2)).

    ``pred`` is the predicted map in [0, 1]; ``truth`` the ground-truth
    mask (expected binary). Ranges over [-0.5, 0]; an all-zero pair is the
    0/0 case and returns 0 with a degeneracy warning.
    """
    y = as_grid(pred)
    yhat = as_grid(truth)
    if y.shape != yhat.shape:
        raise GridShapeError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise ValueError("predictions must lie in [0, 1]")
    denom = float(np.sum(y * y) + np.sum(yhat * yhat))
    if denom == 0.0:
        warnings.warn(
            "dice_loss: both grids all-zero, 0/0 resolved to 0",
            RuntimeWarning,
            stacklevel=2,
        )
        return 0.0
    return float(-np.sum(y * yhat) / denom)


def total_loss(ce: float, focal: float, dice: float, weights: LossWeights) -> float:
    """Weighted sum alpha*ce + beta*focal + delta*dice."""
    for name, value in (("ce", ce), ("focal", focal), ("dice", dice)):
        if not np.isfinite(value):
            raise ValueError(f"{name} term is not finite: {value}")
    return weights.alpha * ce + weights.beta * focal + weights.delta * dice
