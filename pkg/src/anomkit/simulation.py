"""Anomaly synthesis: cut-paste region transfer smoothed by Poisson blending.

A simulated anomaly is built by cropping a block region from a donor image
and transplanting it into a normal image. Plain cut-paste leaves a visible
seam; the Poisson path instead solves the discrete Poisson equation on the
pasted region's interior (Dirichlet boundary taken from the destination),
so the transplant matches its surroundings at the border. The guidance
field comes from the donor's gradients, or edge-wise from whichever of the
donor/destination gradients is larger in magnitude ("mixed" mode, the
default, which preserves destination texture inside the region).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imgio

CG_RTOL = 1e-8
CG_ATOL_INF = 1e-7
CG_MAX_ITER = 10_000
_SAMPLE_TRIES = 10_000


class RegionError(ValueError):
    """A region is inconsistent with the images it is applied to."""


class RegionConfigError(ValueError):
    """Region sampling bounds cannot be satisfied."""


class PoissonConvergenceError(RuntimeError):
    """The Poisson solver did not reach tolerance within max iterations."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class RegionSpec:
    """Source rectangle (x0, y0, w, h) plus destination top-left (dx, dy)."""

    x0: int
    y0: int
    w: int
    h: int
    dx: int
    dy: int

    def __post_init__(self) -> None:
        if self.w < 1 or self.h < 1:
            raise RegionError(f"region sides must be >= 1, got {self.w}x{self.h}")
        if min(self.x0, self.y0, self.dx, self.dy) < 0:
            raise RegionError("region offsets must be non-negative")


@dataclass(frozen=True)
class RegionConfig:
    """Size and shape bounds for sampled regions.

    Area bounds are fractions of the destination image area; aspect is
    height / width. min_side keeps the interior non-empty for blending.
    """

    min_area_frac: float = 0.005
    max_area_frac: float = 0.05
    min_aspect: float = 0.3
    max_aspect: float = 3.3
    min_side: int = 3

    def __post_init__(self) -> None:
        if not (0 < self.min_area_frac <= self.max_area_frac):
            raise RegionConfigError("need 0 < min_area_frac <= max_area_frac")
        if not (0 < self.min_aspect <= self.max_aspect):
            raise RegionConfigError("need 0 < min_aspect <= max_aspect")
        if self.min_side < 1:
            raise RegionConfigError("min_side must be >= 1")


@dataclass(frozen=True)
class SimulateConfig:
    region: RegionConfig = field(default_factory=RegionConfig)
    max_patches: int = 3
    mode: str = "mixed"  # "mixed" or "source"

    def __post_init__(self) -> None:
        if self.max_patches < 1:
            raise ValueError("max_patches must be >= 1")
        if self.mode not in ("mixed", "source"):
            raise ValueError(f"unknown blend mode {self.mode!r}")


@dataclass(frozen=True)
class AnomalySample:
    """A synthesized anomalous image with its pixel mask and provenance."""

    image: np.ndarray
    mask: np.ndarray
    provenance: tuple[RegionSpec, ...]
    category: str
    seed: int


def validate_rgb(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise RegionError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 8 or img.shape[1] < 8:
        raise RegionError(f"image must be at least 8x8, got {img.shape[:2]}")
    if np.any(img < 0.0) or np.any(img > 1.0):
        raise RegionError("image values must lie in [0, 1]")
    return img


def _check_region(region: RegionSpec, src_shape, dst_shape) -> None:
    if region.y0 + region.h > src_shape[0] or region.x0 + region.w > src_shape[1]:
        raise RegionError(f"{region} exceeds source image of shape {src_shape[:2]}")
    if region.dy + region.h > dst_shape[0] or region.dx + region.w > dst_shape[1]:
        raise RegionError(f"{region} exceeds destination image of shape {dst_shape[:2]}")


def sample_region(rng_seed: int, src_dims, dst_dims, cfg: RegionConfig = RegionConfig()) -> RegionSpec:
    """Draw a region satisfying the configured bounds, deterministic in the seed."""
    return _sample_region(np.random.default_rng(rng_seed), src_dims, dst_dims, cfg)


def _region_feasible(src_dims, dst_dims, cfg: RegionConfig) -> bool:
    sh, sw = src_dims
    dh, dw = dst_dims
    max_h = min(sh, dh)
    max_w = min(sw, dw)
    area = dh * dw
    a_lo, a_hi = cfg.min_area_frac * area, cfg.max_area_frac * area
    for h in range(cfg.min_side, max_h + 1):
        w_lo = max(cfg.min_side, int(np.ceil(a_lo / h)), int(np.ceil(h / cfg.max_aspect)), int(np.ceil(16 / h)))
        w_hi = min(max_w, int(np.floor(a_hi / h)), int(np.floor(h / cfg.min_aspect)))
        if w_lo <= w_hi:
            return True
    return False


def _sample_region(rng: np.random.Generator, src_dims, dst_dims, cfg: RegionConfig) -> RegionSpec:
    sh, sw = int(src_dims[0]), int(src_dims[1])
    dh, dw = int(dst_dims[0]), int(dst_dims[1])
    if not _region_feasible((sh, sw), (dh, dw), cfg):
        raise RegionConfigError(
            f"no integer region satisfies {cfg} within source {src_dims} / destination {dst_dims}"
        )
    dst_area = dh * dw
    a_lo, a_hi = cfg.min_area_frac * dst_area, cfg.max_area_frac * dst_area
    max_h = min(sh, dh)
    max_w = min(sw, dw)
    log_lo, log_hi = np.log(cfg.min_aspect), np.log(cfg.max_aspect)
    for _ in range(_SAMPLE_TRIES):
        area = rng.uniform(a_lo, a_hi)
        aspect = np.exp(rng.uniform(log_lo, log_hi))  # h / w
        h = int(np.clip(round(np.sqrt(area * aspect)), cfg.min_side, max_h))
        w = int(np.clip(round(np.sqrt(area / aspect)), cfg.min_side, max_w))
        if not (a_lo <= h * w <= a_hi):
            continue
        if not (cfg.min_aspect <= h / w <= cfg.max_aspect):
            continue
        if h * w < 16:
            continue
        x0 = int(rng.integers(0, sw - w + 1))
        y0 = int(rng.integers(0, sh - h + 1))
        dx = int(rng.integers(0, dw - w + 1))
        dy = int(rng.integers(0, dh - h + 1))
        return RegionSpec(x0=x0, y0=y0, w=w, h=h, dx=dx, dy=dy)
    raise RegionConfigError(
        f"region sampling failed after {_SAMPLE_TRIES} tries; bounds {cfg} are too tight"
    )


def cut_paste(dst, src, region: RegionSpec) -> tuple[np.ndarray, np.ndarray]:
    """Copy the source rectangle verbatim into the destination.

    Returns the pasted image and the binary mask of the pasted rectangle.
    """
    dst = validate_rgb(dst)
    src = validate_rgb(src)
    _check_region(region, src.shape, dst.shape)
    out = dst.copy()
    out[region.dy : region.dy + region.h, region.dx : region.dx + region.w] = src[
        region.y0 : region.y0 + region.h, region.x0 : region.x0 + region.w
    ]
    mask = np.zeros(dst.shape[:2], dtype=np.float64)
    mask[region.dy : region.dy + region.h, region.dx : region.dx + region.w] = 1.0
    return out, mask


def boundary_jump(image, region: RegionSpec) -> float:
    """Mean absolute difference across the region border's inside/outside pairs."""
    img = np.asarray(image, dtype=np.float64)
    y0, y1 = region.dy, region.dy + region.h
    x0, x1 = region.dx, region.dx + region.w
    diffs = []
    if y0 > 0:
        diffs.append(np.abs(img[y0, x0:x1] - img[y0 - 1, x0:x1]))
    if y1 < img.shape[0]:
        diffs.append(np.abs(img[y1 - 1, x0:x1] - img[y1, x0:x1]))
    if x0 > 0:
        diffs.append(np.abs(img[y0:y1, x0] - img[y0:y1, x0 - 1]))
    if x1 < img.shape[1]:
        diffs.append(np.abs(img[y0:y1, x1 - 1] - img[y0:y1, x1]))
    if not diffs:
        return 0.0
    return float(np.mean(np.concatenate([d.reshape(-1) for d in diffs])))


def _laplace_apply(x: np.ndarray) -> np.ndarray:
    # 5-point Laplacian with homogeneous Dirichlet outside the interior block.
    y = 4.0 * x
    y[1:, :] -= x[:-1, :]
    y[:-1, :] -= x[1:, :]
    y[:, 1:] -= x[:, :-1]
    y[:, :-1] -= x[:, 1:]
    return y


def _cg_laplace(b: np.ndarray, x0: np.ndarray, rtol: float, atol_inf: float, max_iter: int) -> np.ndarray:
    # Plain conjugate gradient on the SPD 5-point system; the residual is
    # recomputed directly every 50 steps to cancel accumulated roundoff.
    x = x0.copy()
    r = b - _laplace_apply(x)
    b_norm = max(float(np.linalg.norm(b)), 1e-300)

    def converged(res: np.ndarray) -> bool:
        return float(np.linalg.norm(res)) <= rtol * b_norm and float(
            np.max(np.abs(res))
        ) <= atol_inf

    if converged(r):
        return x
    p = r.copy()
    rs = float(np.sum(r * r))
    for it in range(1, max_iter + 1):
        ap = _laplace_apply(p)
        alpha = rs / float(np.sum(p * ap))
        x += alpha * p
        if it % 50 == 0:
            r = b - _laplace_apply(x)
        else:
            r -= alpha * ap
        if converged(r):
            return x
        rs_new = float(np.sum(r * r))
        p = r + (rs_new / rs) * p
        rs = rs_new
    final = b - _laplace_apply(x)
    raise PoissonConvergenceError(
        f"conjugate gradient did not converge in {max_iter} iterations "
        f"(residual inf-norm {float(np.max(np.abs(final))):.3e})",
        residual=float(np.max(np.abs(final))),
    )


def _guidance_divergence(f: np.ndarray, g: np.ndarray, mode: str) -> np.ndarray:
    """Divergence of the guidance field at interior pixels of the rectangle.

    f is the destination rectangle, g the source rectangle. In mixed mode
    the stronger of the two gradients is kept edge by edge; ties keep the
    source gradient.
    """
    center = (slice(1, -1), slice(1, -1))
    shifts = [
        (slice(0, -2), slice(1, -1)),  # north neighbor
        (slice(2, None), slice(1, -1)),  # south
        (slice(1, -1), slice(0, -2)),  # west
        (slice(1, -1), slice(2, None)),  # east
    ]
    div = np.zeros((f.shape[0] - 2, f.shape[1] - 2), dtype=np.float64)
    for nb in shifts:
        dg = g[center] - g[nb]
        if mode == "source":
            div += dg
        else:
            df = f[center] - f[nb]
            div += np.where(np.abs(df) > np.abs(dg), df, dg)
    return div


def _blend_rect(f: np.ndarray, g: np.ndarray, mode: str, rtol: float, atol_inf: float, max_iter: int) -> np.ndarray:
    b = _guidance_divergence(f, g, mode)
    # Dirichlet boundary: the rectangle's outer ring keeps destination values.
    b[0, :] += f[0, 1:-1]
    b[-1, :] += f[-1, 1:-1]
    b[:, 0] += f[1:-1, 0]
    b[:, -1] += f[1:-1, -1]
    # Warm start from the destination makes consistent inputs a no-op.
    interior = _cg_laplace(b, f[1:-1, 1:-1], rtol, atol_inf, max_iter)
    out = f.copy()
    out[1:-1, 1:-1] = interior
    return out


def poisson_blend(
    dst,
    src,
    region: RegionSpec,
    mode: str = "mixed",
    rtol: float = CG_RTOL,
    atol_inf: float = CG_ATOL_INF,
    max_iter: int = CG_MAX_ITER,
) -> np.ndarray:
    """Transplant the source rectangle by solving the Poisson equation.

    Per channel, the region interior solves lap(u) = div(v) with Dirichlet
    boundary equal to the destination, where v is the guidance field chosen
    by ``mode``. Boundary pixels equal the destination exactly; the solved
    interior is clamped to [0, 1].
    """
    dst = validate_rgb(dst)
    src = validate_rgb(src)
    _check_region(region, src.shape, dst.shape)
    if region.w < 3 or region.h < 3:
        raise RegionError(f"blend region needs w >= 3 and h >= 3, got {region.w}x{region.h}")
    if mode not in ("mixed", "source"):
        raise ValueError(f"unknown blend mode {mode!r}")
    out = dst.copy()
    ys = slice(region.dy, region.dy + region.h)
    xs = slice(region.dx, region.dx + region.w)
    for c in range(3):
        f = dst[ys, xs, c]
        g = src[region.y0 : region.y0 + region.h, region.x0 : region.x0 + region.w, c]
        out[ys, xs, c] = np.clip(_blend_rect(f, g, mode, rtol, atol_inf, max_iter), 0.0, 1.0)
    return out


def simulate_anomaly(
    normal,
    donor,
    rng_seed: int,
    cfg: SimulateConfig = SimulateConfig(),
    category: str = "object",
) -> AnomalySample:
    """Blend 1..max_patches donor regions into a normal image.

    The donor may equal the normal image, in which case a self-mapped
    region is a near-no-op but the sample (and its mask) is still emitted.
    Deterministic given the seed.
    """
    normal = validate_rgb(normal)
    donor = validate_rgb(donor)
    if normal.shape != donor.shape:
        raise RegionError(
            f"normal and donor must share dimensions, got {normal.shape} vs {donor.shape}"
        )
    rng = np.random.default_rng(rng_seed)
    n_patches = int(rng.integers(1, cfg.max_patches + 1))
    image = normal
    mask = np.zeros(normal.shape[:2], dtype=np.float64)
    regions = []
    for _ in range(n_patches):
        region = _sample_region(rng, donor.shape[:2], normal.shape[:2], cfg.region)
        image = poisson_blend(image, donor, region, mode=cfg.mode)
        mask[region.dy : region.dy + region.h, region.dx : region.dx + region.w] = 1.0
        regions.append(region)
    return AnomalySample(
        image=image, mask=mask, provenance=tuple(regions), category=category, seed=int(rng_seed)
    )


def write_sample(sample: AnomalySample, root) -> dict[str, Path]:
    """Persist a sample as `<category>/<seed>_img.png` + mask + JSON sidecar."""
    out_dir = Path(root) / sample.category
    out_dir.mkdir(parents=True, exist_ok=True)
    img_path = out_dir / f"{sample.seed}_img.png"
    mask_path = out_dir / f"{sample.seed}_mask.png"
    meta_path = out_dir / f"{sample.seed}_meta.json"
    imgio.save_image_rgb(sample.image, img_path)
    imgio.save_mask(sample.mask, mask_path)
    meta = {
        "seed": sample.seed,
        "category": sample.category,
        "regions": [asdict(r) for r in sample.provenance],
    }
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return {"image": img_path, "mask": mask_path, "meta": meta_path}
