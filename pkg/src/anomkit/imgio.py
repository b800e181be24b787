"""8-bit PNG input/output helpers shared by the simulation writer and CLI."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

# Piecewise-linear perceptual ramp (dark violet to yellow) for heatmaps.
_RAMP = np.array(
    [
        (0.267, 0.005, 0.329),
        (0.283, 0.141, 0.458),
        (0.254, 0.265, 0.530),
        (0.207, 0.372, 0.553),
        (0.164, 0.471, 0.558),
        (0.128, 0.567, 0.551),
        (0.135, 0.659, 0.518),
        (0.267, 0.749, 0.441),
        (0.478, 0.821, 0.318),
        (0.741, 0.873, 0.150),
        (0.993, 0.906, 0.144),
    ],
    dtype=np.float64,
)


def load_image_rgb(path) -> np.ndarray:
    """Read a PNG (or other PIL-readable file) as float64 RGB in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


def save_image_rgb(image: np.ndarray, path) -> None:
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(Path(path), format="PNG")


def load_mask(path) -> np.ndarray:
    """Read a mask PNG; any nonzero pixel becomes 1.0."""
    with Image.open(path) as img:
        gray = np.asarray(img.convert("L"))
    return (gray != 0).astype(np.float64)


def save_mask(mask: np.ndarray, path) -> None:
    data = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Image.fromarray(data, mode="L").save(Path(path), format="PNG")


def save_heatmap(score_map: np.ndarray, path) -> None:
    """Render a score map through the fixed ramp and save as PNG.

    The map's min/max are embedded in `map_min`/`map_max` text chunks; the
    raw float dump, not the PNG, is the source of truth.
    """
    arr = np.asarray(score_map, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo if hi > lo else 1.0
    unit = (arr - lo) / span
    pos = unit * (len(_RAMP) - 1)
    idx = np.minimum(pos.astype(np.intp), len(_RAMP) - 2)
    frac = (pos - idx)[..., None]
    rgb = _RAMP[idx] * (1.0 - frac) + _RAMP[idx + 1] * frac
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    info = PngInfo()
    info.add_text("map_min", repr(lo))
    info.add_text("map_max", repr(hi))
    Image.fromarray(data, mode="RGB").save(Path(path), format="PNG", pnginfo=info)
