"""Threshold-free verdicts: calibration, grid naming and templated answers.

The image score is the anomaly map's maximum. The decision threshold is
never hand-set: it is calibrated by sweeping all candidate cut points
between observed scores of held-out normal images and simulated anomalies,
maximizing balanced accuracy. Locations are reported over a 3x3 grid of
named regions, and the response text follows exactly one of two templates:

    "Yes, there is an anomaly in the image, at the {cells} of the image."
    "No, there are no anomalies in the image."
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import as_grid

CELL_NAMES = (
    "top left",
    "top",
    "top right",
    "left",
    "center",
    "right",
    "bottom left",
    "bottom",
    "bottom right",
)
CELL_POSITIVE_FRACTION = 0.01

YES_TEMPLATE = "Yes, there is an anomaly in the image, at the {cells} of the image."
NO_TEMPLATE = "No, there are no anomalies in the image."


@dataclass(frozen=True)
class CalibratedThreshold:
    """Decision threshold with the calibration evidence that produced it."""

    value: float
    balanced_accuracy: float
    normal_hist: tuple[np.ndarray, np.ndarray]
    anomalous_hist: tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class Verdict:
    is_anomalous: bool
    image_score: float
    grid_cells: tuple[str, ...]
    response_text: str


def image_score(anomaly_map) -> float:
    """Maximum pixel value of the map."""
    return float(np.max(as_grid(anomaly_map)))


def calibrate_threshold(normal_scores, anomalous_scores) -> CalibratedThreshold:
    """Pick the midpoint cut maximizing balanced accuracy, ties to the larger.

    Candidates are the midpoints of adjacent sorted unique scores pooled
    over both lists; an image is called anomalous when its score exceeds
    the threshold.
    """
    normal = np.asarray(normal_scores, dtype=np.float64)
    anomalous = np.asarray(anomalous_scores, dtype=np.float64)
    if normal.size == 0 or anomalous.size == 0:
        raise ValueError("calibration requires scores from both classes")
    pooled = np.unique(np.concatenate([normal, anomalous]))
    if pooled.size > 1:
        candidates = (pooled[:-1] + pooled[1:]) / 2.0
    else:
        candidates = pooled
    best_value = candidates[0]
    best_acc = -1.0
    for t in candidates:
        tpr = float(np.mean(anomalous > t))
        tnr = float(np.mean(normal <= t))
        acc = 0.5 * (tpr + tnr)
        if acc >= best_acc:  # scanning ascending, >= walks ties to the larger t
            best_acc = acc
            best_value = t
    lo = float(pooled[0])
    hi = float(pooled[-1])
    bins = np.linspace(lo, hi if hi > lo else lo + 1.0, 21)
    return CalibratedThreshold(
        value=float(best_value),
        balanced_accuracy=float(best_acc),
        normal_hist=np.histogram(normal, bins=bins),
        anomalous_hist=np.histogram(anomalous, bins=bins),
    )


def _cell_bounds(length: int) -> list[tuple[int, int]]:
    # 3-way split; remainder pixels are absorbed by the last band.
    third = length // 3
    return [(0, third), (third, 2 * third), (2 * third, length)]


def grid_cells(grid) -> list[str]:
    """Names of 3x3 cells whose positive fraction reaches 1%, row-major."""
    g = as_grid(grid)
    if g.shape[0] < 3 or g.shape[1] < 3:
        raise ValueError(f"grid must be at least 3x3 to partition, got {g.shape}")
    positive = g > 0.5
    names = []
    for r, (y0, y1) in enumerate(_cell_bounds(g.shape[0])):
        for c, (x0, x1) in enumerate(_cell_bounds(g.shape[1])):
            cell = positive[y0:y1, x0:x1]
            if np.count_nonzero(cell) >= CELL_POSITIVE_FRACTION * cell.size:
                names.append(CELL_NAMES[3 * r + c])
    return names


def cell_of_pixel(row: int, col: int, shape) -> str:
    """Name of the 3x3 cell containing one pixel."""
    r = next(i for i, (y0, y1) in enumerate(_cell_bounds(shape[0])) if y0 <= row < y1)
    c = next(i for i, (x0, x1) in enumerate(_cell_bounds(shape[1])) if x0 <= col < x1)
    return CELL_NAMES[3 * r + c]


def cells_or_fallback(binary_grid, score_grid=None) -> list[str]:
    """grid_cells, falling back to the hottest pixel's cell when all cells
    fall under the 1% cutoff (keeps location reports non-empty)."""
    cells = grid_cells(binary_grid)
    if cells:
        return cells
    g = as_grid(score_grid if score_grid is not None else binary_grid)
    row, col = np.unravel_index(int(np.argmax(g)), g.shape)
    return [cell_of_pixel(int(row), int(col), g.shape)]


def render_verdict(anomaly_map, threshold) -> Verdict:
    """Binary verdict with located cells and the templated response text."""
    value = threshold.value if isinstance(threshold, CalibratedThreshold) else float(threshold)
    score = image_score(anomaly_map)
    if score > value:
        binary = (as_grid(anomaly_map) > value).astype(np.float64)
        cells = tuple(cells_or_fallback(binary, anomaly_map))
        text = YES_TEMPLATE.format(cells=" and ".join(cells))
        return Verdict(is_anomalous=True, image_score=score, grid_cells=cells, response_text=text)
    return Verdict(
        is_anomalous=False, image_score=score, grid_cells=(), response_text=NO_TEMPLATE
    )
