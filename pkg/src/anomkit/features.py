"""Multi-stage patch features: a deterministic toy extractor plus file ingestion.

The toy backend stands in for a frozen deep encoder. It resizes the image
to 224x224, grids it into G x G cells, computes a 20-dim hand-crafted
descriptor per cell (per-channel mean and standard deviation, a 12-bin
gradient-orientation histogram weighted by magnitude, two reserved zeros)
and projects the descriptor through a fixed seeded random matrix per stage.
Real encoder outputs can be supplied instead via the PFS1 file format.

PFS1 layout (little-endian throughout):

    bytes 0..3   magic b"PFS1"
    u32          stage count, must be 4
    u32 x 12     per-stage H_i, W_i, C_i
    u32          final feature dimension
    f32 payload  stage arrays in row-major (h, w, c) order, then the
                 final feature vector
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core_math import interp_matrix

IMAGE_SIZE = 224
DESCRIPTOR_DIM = 20
N_STAGES = 4
N_ORIENT_BINS = 12

MAGIC = b"PFS1"


class FeatureFormatError(ValueError):
    """A PFS1 file failed to parse; the message names the offending field."""


@dataclass(frozen=True)
class PatchFeatureStack:
    """Per-stage patch feature grids plus the whole-image final feature."""

    stages: tuple[np.ndarray, ...]
    final_feature: np.ndarray

    def __post_init__(self) -> None:
        if len(self.stages) != N_STAGES:
            raise ValueError(f"expected {N_STAGES} stages, got {len(self.stages)}")
        for i, stage in enumerate(self.stages):
            if stage.ndim != 3:
                raise ValueError(f"stage {i} must be (H, W, C), got shape {stage.shape}")
            if not np.all(np.isfinite(stage)):
                raise ValueError(f"stage {i} contains non-finite values")
        if self.final_feature.ndim != 1:
            raise ValueError("final_feature must be a vector")

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return tuple(s.shape[2] for s in self.stages)


@dataclass(frozen=True)
class FeatureBackendConfig:
    backend: str = "toy"  # "toy" or "file"
    grid_size: int = 16
    stage_dims: tuple[int, int, int, int] = (64, 64, 64, 64)
    final_dim: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        if self.backend not in ("toy", "file"):
            raise ValueError(f"unknown feature backend {self.backend!r}")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        if len(self.stage_dims) != N_STAGES:
            raise ValueError(f"need {N_STAGES} stage dims")
        if min(self.stage_dims) < 8 or self.final_dim < 8:
            raise ValueError("feature dimensions must be >= 8")


def resize_bilinear_rgb(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W, 3) image with align-corners bilinear weights."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError("image too small to resize")
    if img.shape[:2] == (out_h, out_w):
        return img
    rows = interp_matrix(out_h, img.shape[0])
    cols = interp_matrix(out_w, img.shape[1])
    return np.einsum("oh,hwc,pw->opc", rows, img, cols, optimize=True)


def _finite_diff_gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Central differences inside, one-sided at the borders.
    gx = np.empty_like(gray)
    gx[:, 1:-1] = 0.5 * (gray[:, 2:] - gray[:, :-2])
    gx[:, 0] = gray[:, 1] - gray[:, 0]
    gx[:, -1] = gray[:, -1] - gray[:, -2]
    gy = np.empty_like(gray)
    gy[1:-1, :] = 0.5 * (gray[2:, :] - gray[:-2, :])
    gy[0, :] = gray[1, :] - gray[0, :]
    gy[-1, :] = gray[-1, :] - gray[-2, :]
    return gx, gy


def _orientation_histogram(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    mag = np.hypot(gx, gy)
    theta = np.arctan2(gy, gx)
    bins = np.minimum(
        ((theta + np.pi) / (2.0 * np.pi / N_ORIENT_BINS)).astype(np.intp),
        N_ORIENT_BINS - 1,
    )
    hist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=N_ORIENT_BINS)
    total = hist.sum()
    return hist / total if total > 0 else hist


def _patch_descriptor(cell: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    desc = np.zeros(DESCRIPTOR_DIM, dtype=np.float64)
    desc[0:3] = cell.mean(axis=(0, 1))
    desc[3:6] = cell.std(axis=(0, 1))
    desc[6 : 6 + N_ORIENT_BINS] = _orientation_histogram(gx, gy)
    return desc


def cell_descriptors(image: np.ndarray, grid_size: int) -> np.ndarray:
    """20-dim descriptor per cell of the G x G grid, shape (G, G, 20).

    Dims 0..2 are per-channel means, 3..5 per-channel standard deviations,
    6..17 the normalized orientation histogram and 18..19 reserved zeros.
    The mean/std part is exactly equivariant under horizontal flips.
    """
    img = resize_bilinear_rgb(image, IMAGE_SIZE, IMAGE_SIZE)
    gray = img.mean(axis=2)
    gx, gy = _finite_diff_gradients(gray)
    edges = np.round(np.linspace(0, IMAGE_SIZE, grid_size + 1)).astype(np.intp)
    out = np.zeros((grid_size, grid_size, DESCRIPTOR_DIM), dtype=np.float64)
    for i in range(grid_size):
        ys = slice(edges[i], edges[i + 1])
        for j in range(grid_size):
            xs = slice(edges[j], edges[j + 1])
            out[i, j] = _patch_descriptor(img[ys, xs], gx[ys, xs], gy[ys, xs])
    return out


def global_descriptor(image: np.ndarray) -> np.ndarray:
    """Whole-image descriptor, same recipe as a single cell."""
    img = resize_bilinear_rgb(image, IMAGE_SIZE, IMAGE_SIZE)
    gray = img.mean(axis=2)
    gx, gy = _finite_diff_gradients(gray)
    return _patch_descriptor(img, gx, gy)


@lru_cache(maxsize=32)
def _projection(seed: int, tag: int, out_dim: int) -> np.ndarray:
    # Entries N(0, 1/DESCRIPTOR_DIM) so projected distances are roughly preserved.
    rng = np.random.default_rng([seed, tag])
    mat = rng.normal(0.0, 1.0 / np.sqrt(DESCRIPTOR_DIM), size=(DESCRIPTOR_DIM, out_dim))
    mat.setflags(write=False)
    return mat


def toy_extract(image: np.ndarray, cfg: FeatureBackendConfig) -> PatchFeatureStack:
    """Extract a 4-stage feature stack, fully deterministic given cfg.seed."""
    desc = cell_descriptors(image, cfg.grid_size)
    stages = []
    for i, dim in enumerate(cfg.stage_dims):
        proj = _projection(cfg.seed, i, dim)
        stages.append((desc @ proj).astype(np.float32))
    final = (global_descriptor(image) @ _projection(cfg.seed, N_STAGES, cfg.final_dim)).astype(
        np.float32
    )
    return PatchFeatureStack(stages=tuple(stages), final_feature=final)


def save_features(stack: PatchFeatureStack, path) -> None:
    """Write a stack in the PFS1 format; round-trips bit-exactly."""
    parts = [MAGIC, struct.pack("<I", len(stack.stages))]
    for stage in stack.stages:
        parts.append(struct.pack("<III", *stage.shape))
    parts.append(struct.pack("<I", stack.final_feature.shape[0]))
    for stage in stack.stages:
        parts.append(np.ascontiguousarray(stage, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(stack.final_feature, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_features(path) -> PatchFeatureStack:
    """Parse a PFS1 file, raising FeatureFormatError naming any bad field."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FeatureFormatError("file truncated before magic bytes")
    magic = data[:4]
    if magic != MAGIC:
        raise FeatureFormatError(
            f"unsupported magic/version {magic!r}, expected {MAGIC!r}"
        )
    offset = 4

    def take_u32(name: str) -> int:
        nonlocal offset
        if offset + 4 > len(data):
            raise FeatureFormatError(f"file truncated in header field {name!r}")
        (value,) = struct.unpack_from("<I", data, offset)
        offset += 4
        return value

    count = take_u32("stage count")
    if count != N_STAGES:
        raise FeatureFormatError(f"stage count must be {N_STAGES}, got {count}")
    shapes = []
    for i in range(N_STAGES):
        h = take_u32(f"stage {i} height")
        w = take_u32(f"stage {i} width")
        c = take_u32(f"stage {i} channels")
        if min(h, w, c) < 1:
            raise FeatureFormatError(f"stage {i} has zero-sized dimension ({h}, {w}, {c})")
        shapes.append((h, w, c))
    final_dim = take_u32("final feature dimension")
    if final_dim < 1:
        raise FeatureFormatError("final feature dimension must be >= 1")

    def take_f32(name: str, count: int, shape) -> np.ndarray:
        nonlocal offset
        nbytes = 4 * count
        if offset + nbytes > len(data):
            raise FeatureFormatError(f"file truncated in payload of {name}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += nbytes
        return arr.copy()

    stages = tuple(
        take_f32(f"stage {i}", h * w * c, (h, w, c)) for i, (h, w, c) in enumerate(shapes)
    )
    final = take_f32("final feature", final_dim, (final_dim,))
    if offset != len(data):
        raise FeatureFormatError(
            f"trailing bytes after payload ({len(data) - offset} extra)"
        )
    return PatchFeatureStack(stages=stages, final_feature=final)
