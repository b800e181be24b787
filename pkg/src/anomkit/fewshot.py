"""Memory banks of normal patch features and distance-based localization.

Patches from normal reference images are stored per stage, L2-normalized.
A query patch scores 1 minus the cosine similarity to its most similar
stored patch; the four per-stage score grids are upsampled, averaged and
clamped to [0, 1]. Nearest neighbors are exact: a blocked brute-force scan
over the bank keeps working sets cache-sized instead of approximating.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_math import bilinear_upsample, l2_normalize
from .features import IMAGE_SIZE, N_STAGES, PatchFeatureStack

BANK_MAGIC = b"MBK1"
_BLOCK_ROWS = 2048


class BankFormatError(ValueError):
    """An MBK1 file failed to parse."""


@dataclass(frozen=True)
class MemoryBank:
    """Per-stage matrices of stored unit-norm patch features."""

    stages: tuple[np.ndarray, ...]
    image_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.stages) != N_STAGES:
            raise ValueError(f"expected {N_STAGES} stages, got {len(self.stages)}")
        for i, stage in enumerate(self.stages):
            if stage.ndim != 2 or stage.shape[0] < 1:
                raise ValueError(f"stage {i} must be a non-empty (N, C) matrix")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(s.shape[0] for s in self.stages)


def _farthest_point_indices(points: np.ndarray, k: int) -> list[int]:
    # Greedy k-center: start at index 0, repeatedly take the point farthest
    # from the selected set; ties resolve to the smallest index via argmax.
    selected = [0]
    dist = np.sum((points - points[0]) ** 2, axis=1)
    while len(selected) < k:
        idx = int(np.argmax(dist))
        selected.append(idx)
        dist = np.minimum(dist, np.sum((points - points[idx]) ** 2, axis=1))
    return selected


def build_memory_bank(
    normal_stacks, coreset_fraction: float = 1.0, image_ids=None
) -> MemoryBank:
    """Pool all patches of the given stacks into per-stage banks.

    Every stored vector is L2-normalized (zero patches stay zero with a
    warning). A coreset_fraction below 1 keeps ceil(fraction * N) vectors
    per stage via greedy farthest-point subsampling; the result is
    deterministic given input order and fraction.
    """
    stacks = list(normal_stacks)
    if not stacks:
        raise ValueError("memory bank needs at least one feature stack")
    if not 0.0 < coreset_fraction <= 1.0:
        raise ValueError("coreset_fraction must lie in (0, 1]")
    stages = []
    for i in range(N_STAGES):
        pooled = np.concatenate(
            [s.stages[i].reshape(-1, s.stages[i].shape[2]).astype(np.float64) for s in stacks]
        )
        normalized, degenerate = l2_normalize(pooled, return_degenerate=True)
        if np.any(degenerate):
            warnings.warn(
                f"stage {i}: {int(np.sum(degenerate))} zero-norm patches stored as zeros",
                RuntimeWarning,
                stacklevel=2,
            )
        if coreset_fraction < 1.0:
            k = max(1, math.ceil(coreset_fraction * normalized.shape[0]))
            normalized = normalized[_farthest_point_indices(normalized, k)]
        stages.append(normalized)
    ids = tuple(image_ids) if image_ids is not None else ()
    return MemoryBank(stages=tuple(stages), image_ids=ids)


def localize_fewshot(
    stack: PatchFeatureStack,
    bank: MemoryBank,
    block_rows: int = _BLOCK_ROWS,
    return_stage_grids: bool = False,
):
    """Distance map against the bank: per patch 1 - max cosine similarity.

    Stage grids are upsampled to 224x224 and averaged; since cosine can be
    negative the average is clamped to [0, 1]. Clamping never reorders
    pixels below the clamp point.
    """
    stage_grids = []
    acc = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    for i in range(N_STAGES):
        grid = stack.stages[i]
        if grid.shape[2] != bank.stages[i].shape[1]:
            raise ValueError(
                f"stage {i}: query dim {grid.shape[2]} does not match bank dim "
                f"{bank.stages[i].shape[1]}"
            )
        h, w, c = grid.shape
        queries = l2_normalize(grid.reshape(h * w, c).astype(np.float64))
        best = np.full(h * w, -np.inf)
        stored = bank.stages[i]
        for start in range(0, stored.shape[0], block_rows):
            sims = queries @ stored[start : start + block_rows].T
            np.maximum(best, sims.max(axis=1), out=best)
        scores = (1.0 - best).reshape(h, w)
        stage_grids.append(scores)
        acc += bilinear_upsample(scores, IMAGE_SIZE, IMAGE_SIZE)
    anomaly_map = np.clip(acc / N_STAGES, 0.0, 1.0)
    if return_stage_grids:
        return anomaly_map, stage_grids
    return anomaly_map


def save_bank(bank: MemoryBank, path) -> None:
    """MBK1 checkpoint: magic, per-stage (N_i, C_i) header, f32 payload."""
    parts = [BANK_MAGIC, struct.pack("<I", N_STAGES)]
    for stage in bank.stages:
        parts.append(struct.pack("<II", *stage.shape))
    for stage in bank.stages:
        parts.append(np.ascontiguousarray(stage, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_bank(path) -> MemoryBank:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != BANK_MAGIC:
        raise BankFormatError(f"bad bank magic {data[:4]!r}, expected {BANK_MAGIC!r}")
    offset = 4
    if len(data) < offset + 4:
        raise BankFormatError("bank truncated in header")
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if count != N_STAGES:
        raise BankFormatError(f"stage count must be {N_STAGES}, got {count}")
    shapes = []
    for i in range(N_STAGES):
        if len(data) < offset + 8:
            raise BankFormatError(f"bank truncated in stage {i} header")
        shapes.append(struct.unpack_from("<II", data, offset))
        offset += 8
    stages = []
    for i, (n, c) in enumerate(shapes):
        need = 4 * n * c
        if len(data) < offset + need:
            raise BankFormatError(f"bank truncated in stage {i} payload")
        arr = np.frombuffer(data, dtype="<f4", count=n * c, offset=offset)
        stages.append(arr.reshape(n, c).astype(np.float64))
        offset += need
    if offset != len(data):
        raise BankFormatError(f"trailing bytes after payload ({len(data) - offset} extra)")
    return MemoryBank(stages=tuple(stages))
