"""Dataset ingestion: MVTec-style directory layouts and the synthetic suite.

The on-disk loader validates the conventional layout

    <category>/train/good/*.png
    <category>/test/<defect_type>/*.png
    <category>/ground_truth/<defect_type>/*_mask.png

and fails on the first violation with an error naming it. The synthetic
suite generates two procedural texture categories (oriented stripes and
smooth blobs) at 224x224 with anomalies transplanted from the opposite
category, giving a deterministic desk-scale benchmark that can be
redistributed, unlike the real datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio
from .core_math import bilinear_upsample
from .features import IMAGE_SIZE, resize_bilinear_rgb
from .simulation import AnomalySample, RegionConfig, SimulateConfig, simulate_anomaly

CATEGORY_STRIPES = "stripes"
CATEGORY_BLOBS = "blobs"


class MvtecLayoutError(ValueError):
    """The directory tree violates the expected dataset layout."""


@dataclass(frozen=True)
class DiskTestItem:
    path: Path
    label: int
    mask_path: Path | None


@dataclass(frozen=True)
class DiskCategory:
    name: str
    train_normal: tuple[Path, ...]
    test: tuple[DiskTestItem, ...]


@dataclass(frozen=True)
class TestItem:
    """An in-memory test image with its label and optional truth mask."""

    image_id: str
    image: np.ndarray
    label: int
    mask: np.ndarray | None


@dataclass(frozen=True)
class CategoryData:
    name: str
    train_normals: tuple[np.ndarray, ...]
    test: tuple[TestItem, ...]


def load_mvtec_layout(root) -> dict[str, DiskCategory]:
    """Index an MVTec-style tree; anomalous test images must carry masks."""
    root = Path(root)
    if not root.is_dir():
        raise MvtecLayoutError(f"dataset root is not a directory: {root}")
    categories = sorted(p for p in root.iterdir() if p.is_dir())
    if not categories:
        raise MvtecLayoutError(f"no category directories under {root}")
    out: dict[str, DiskCategory] = {}
    for cat_dir in categories:
        good_dir = cat_dir / "train" / "good"
        if not good_dir.is_dir():
            raise MvtecLayoutError(f"missing directory: {good_dir}")
        train = tuple(sorted(good_dir.glob("*.png")))
        if not train:
            raise MvtecLayoutError(f"no training images in {good_dir}")
        test_dir = cat_dir / "test"
        if not test_dir.is_dir():
            raise MvtecLayoutError(f"missing directory: {test_dir}")
        defect_dirs = sorted(p for p in test_dir.iterdir() if p.is_dir())
        if not defect_dirs:
            raise MvtecLayoutError(f"no test subdirectories in {test_dir}")
        items: list[DiskTestItem] = []
        for defect_dir in defect_dirs:
            images = sorted(defect_dir.glob("*.png"))
            if not images:
                raise MvtecLayoutError(f"no test images in {defect_dir}")
            if defect_dir.name == "good":
                items.extend(DiskTestItem(path=p, label=0, mask_path=None) for p in images)
                continue
            gt_dir = cat_dir / "ground_truth" / defect_dir.name
            if not gt_dir.is_dir():
                raise MvtecLayoutError(f"missing ground truth directory: {gt_dir}")
            for p in images:
                mask = gt_dir / f"{p.stem}_mask.png"
                if not mask.is_file():
                    raise MvtecLayoutError(f"missing mask for anomalous image: {mask}")
                items.append(DiskTestItem(path=p, label=1, mask_path=mask))
        out[cat_dir.name] = DiskCategory(name=cat_dir.name, train_normal=train, test=tuple(items))
    return out


def _resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask
    idx_r = np.round(np.linspace(0.0, mask.shape[0] - 1, size)).astype(np.intp)
    idx_c = np.round(np.linspace(0.0, mask.shape[1] - 1, size)).astype(np.intp)
    return mask[np.ix_(idx_r, idx_c)]


def materialize_mvtec(disk: dict[str, DiskCategory], size: int = IMAGE_SIZE) -> dict[str, CategoryData]:
    """Load a disk index into memory at the working resolution."""
    out: dict[str, CategoryData] = {}
    for name, cat in disk.items():
        train = tuple(
            resize_bilinear_rgb(imgio.load_image_rgb(p), size, size) for p in cat.train_normal
        )
        items = []
        for entry in cat.test:
            image = resize_bilinear_rgb(imgio.load_image_rgb(entry.path), size, size)
            mask = None
            if entry.mask_path is not None:
                mask = _resize_mask(imgio.load_mask(entry.mask_path), size)
            items.append(
                TestItem(image_id=entry.path.stem, image=image, label=entry.label, mask=mask)
            )
        out[name] = CategoryData(name=name, train_normals=train, test=tuple(items))
    return out


@dataclass(frozen=True)
class SuiteConfig:
    """Sizes and seeding for the procedural texture suite."""

    train_per_category: int = 16
    test_normal_per_category: int = 8
    test_anomalous_per_category: int = 8
    seed: int = 0
    sim: SimulateConfig = field(
        default_factory=lambda: SimulateConfig(
            region=RegionConfig(min_area_frac=0.01, max_area_frac=0.05),
            max_patches=2,
            mode="source",
        )
    )


def _coarse_field(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells))
    field_up = bilinear_upsample(coarse, size, size)
    std = float(field_up.std())
    return field_up / std if std > 0 else field_up


_CHANNEL_GAINS = (1.0, 0.92, 0.85)
_CHANNEL_SHIFTS = (0.0, 0.02, 0.04)


def _colorize(base: np.ndarray) -> np.ndarray:
    img = np.stack(
        [np.clip(base * g + s, 0.0, 1.0) for g, s in zip(_CHANNEL_GAINS, _CHANNEL_SHIFTS)], axis=2
    )
    return img


def stripes_image(rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Oriented sinusoidal stripes; only phase and mild noise vary per image."""
    theta = 0.6
    cycles = 9.0
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    coord = (xs * np.cos(theta) + ys * np.sin(theta)) / size
    base = 0.5 + 0.30 * np.sin(2.0 * np.pi * cycles * coord + phase)
    base += 0.03 * _coarse_field(rng, size, 10)
    return _colorize(np.clip(base, 0.0, 1.0))


def blobs_image(rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Smooth blobby field from low-pass noise with a fixed length scale."""
    base = 0.5 + 0.17 * _coarse_field(rng, size, 12)
    base += 0.02 * _coarse_field(rng, size, 28)
    return _colorize(np.clip(base, 0.0, 1.0))


def defect_donor_image(rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """High-frequency isotropic speckle used as the transplant donor.

    Defects must be locally recognizable (a patch-level matcher carries no
    image context), so donors come from a texture family that appears in no
    normal category: fine-grained speckle whose gradient energy is spread
    across orientations.
    """
    base = 0.45 + 0.20 * _coarse_field(rng, size, 56) + 0.10 * _coarse_field(rng, size, 112)
    return _colorize(np.clip(base, 0.0, 1.0))


_GENERATORS = {CATEGORY_STRIPES: stripes_image, CATEGORY_BLOBS: blobs_image}
SUITE_CATEGORIES = (CATEGORY_STRIPES, CATEGORY_BLOBS)


def _suite_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def build_synthetic_suite(cfg: SuiteConfig = SuiteConfig()) -> dict[str, CategoryData]:
    """Deterministic two-category texture benchmark with simulated defects.

    Anomalous test images transplant regions from the opposite category so
    defects are both localized and visibly off-texture.
    """
    out: dict[str, CategoryData] = {}
    for ci, name in enumerate(SUITE_CATEGORIES):
        make = _GENERATORS[name]
        train = tuple(
            make(_suite_rng(cfg.seed, ci, 0, j)) for j in range(cfg.train_per_category)
        )
        items: list[TestItem] = []
        for j in range(cfg.test_normal_per_category):
            items.append(
                TestItem(
                    image_id=f"{name}_normal_{j:03d}",
                    image=make(_suite_rng(cfg.seed, ci, 1, j)),
                    label=0,
                    mask=None,
                )
            )
        for j in range(cfg.test_anomalous_per_category):
            normal = make(_suite_rng(cfg.seed, ci, 2, j))
            donor = defect_donor_image(_suite_rng(cfg.seed, ci, 3, j))
            sim_seed = int(_suite_rng(cfg.seed, ci, 4, j).integers(0, 2**31))
            sample = simulate_anomaly(normal, donor, sim_seed, cfg.sim, category=name)
            items.append(
                TestItem(
                    image_id=f"{name}_anomalous_{j:03d}",
                    image=sample.image,
                    label=1,
                    mask=sample.mask,
                )
            )
        out[name] = CategoryData(name=name, train_normals=train, test=tuple(items))
    return out


def simulate_training_anomalies(
    categories: dict[str, CategoryData],
    per_normal: int,
    sim: SimulateConfig,
    seed: int,
    normals_by_category: dict[str, tuple[np.ndarray, ...]] | None = None,
) -> list[AnomalySample]:
    """Defect-donor transplants for every supplied normal image.

    Each simulation draws a fresh speckle donor; everything is
    deterministic in the seed.
    """
    names = sorted(categories)
    pools = normals_by_category or {n: categories[n].train_normals for n in names}
    seed_rng = np.random.default_rng([seed, 7])
    samples: list[AnomalySample] = []
    for name in names:
        for normal in pools[name]:
            for _ in range(per_normal):
                donor_seed, sim_seed = (int(v) for v in seed_rng.integers(0, 2**31, size=2))
                donor = defect_donor_image(np.random.default_rng([seed, 8, donor_seed]))
                samples.append(simulate_anomaly(normal, donor, sim_seed, sim, category=name))
    return samples
