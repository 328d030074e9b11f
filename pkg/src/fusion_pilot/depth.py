"""Depth sensor-realism pipeline, channel normalisation, crop/downscale and
semantic class remapping.

A depth map is carried as a float64 array of metres plus a boolean
``missing`` mask. The realism pipeline runs, in order: range trimming,
requantisation, inpainting, median filtering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels


@dataclass(frozen=True)
class RangeSpec:
    min_m: float = 1.0
    max_m: float = 100.0
    step_m: float = 0.04

    def __post_init__(self):
        if not 0 < self.min_m < self.max_m:
            raise ValueError("RangeSpec needs 0 < min_m < max_m")
        if self.step_m <= 0:
            raise ValueError("RangeSpec needs step_m > 0")


@dataclass
class DepthMap:
    values: np.ndarray
    missing: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.missing is None:
            self.missing = ~np.isfinite(self.values) | (self.values <= 0)
        else:
            self.missing = np.asarray(self.missing, dtype=bool)
        if self.missing.shape != self.values.shape:
            raise ValueError("missing mask must match depth shape")

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy(), self.missing.copy())


# resolution profiles: (width, height) of the network input
PROFILES = {"paper": (200, 88), "desk": (48, 24)}
# renderer source resolution per profile: (width, height)
SOURCE_RESOLUTION = {"paper": (800, 600), "desk": (64, 48)}


class PipelineError(ValueError):
    pass


def trim_range(d: DepthMap, r: RangeSpec = RangeSpec()) -> DepthMap:
    v = d.values
    out_of_range = (v < r.min_m) | (v > r.max_m) | ~np.isfinite(v)
    return DepthMap(v.copy(), d.missing | out_of_range)


def requantize(d: DepthMap, r: RangeSpec = RangeSpec()) -> DepthMap:
    """Snap valid depths to the nearest multiple of ``step_m`` (ties to even)."""
    valid = ~d.missing
    v = d.values
    if np.any((v[valid] < r.min_m) | (v[valid] > r.max_m)):
        raise PipelineError("requantize: valid depth outside range; trim_range must run first")
    out = v.copy()
    out[valid] = snap_to_grid(v[valid], r.step_m)
    return DepthMap(out, d.missing.copy())


def snap_to_grid(v, step):
    # rounding the ratio to 6 decimals first makes decimal ties (10.02 / 0.04)
    # resolve half-to-even instead of by binary representation error
    return np.round(np.round(np.asarray(v, dtype=np.float64) / step, 6)) * step


def inpaint(d: DepthMap, tol: float | None = None, r: RangeSpec = RangeSpec(),
            max_iter: int | None = None) -> DepthMap:
    """Fill missing pixels by neighbour-mean diffusion.

    Each 4-connected missing region starts at the mean of its valid
    4-neighbour boundary and relaxes until the largest per-sweep change drops
    below ``tol`` (default ``step_m / 10``). Filled values stay within the
    region's boundary min/max.
    """
    missing = d.missing
    if not missing.any():
        return d.copy()
    if missing.all():
        raise PipelineError("inpaint: depth map has no valid pixels")
    tol = r.step_m / 10 if tol is None else tol
    h, w = missing.shape
    max_iter = 20 * h * w if max_iter is None else max_iter
    values = np.where(missing, 0.0, d.values)
    labels, count = ndimage.label(missing)
    cross = ndimage.generate_binary_structure(2, 1)
    for lab in range(1, count + 1):
        region = labels == lab
        ring = ndimage.binary_dilation(region, structure=cross) & ~missing
        values[region] = values[ring].mean()
    filled, _ = kernels.inpaint_diffuse(values, missing, tol, max_iter)
    # fills go back onto the quantisation grid; the boundary min/max are grid
    # values so the bound property survives the rounding
    filled[missing] = snap_to_grid(filled[missing], r.step_m)
    return DepthMap(filled, np.zeros_like(missing))


def median_filter(d: DepthMap, k: int = 3) -> DepthMap:
    if k % 2 == 0 or k < 1:
        raise PipelineError(f"median_filter: window size must be odd, got {k}")
    if d.missing.any():
        raise PipelineError("median_filter: map still has missing pixels")
    out = kernels.median_filter(np.ascontiguousarray(d.values, dtype=np.float64), k)
    return DepthMap(out, np.zeros_like(d.missing))


def saturate(d: DepthMap, r: RangeSpec = RangeSpec()) -> DepthMap:
    """Clamp every reading into range; no-return pixels read as the far limit.

    Only used when a frame has no in-range pixel at all (e.g. the bumper is
    against a wall), where inpainting has nothing to diffuse from.
    """
    v = np.where(d.missing & ~((d.values > 0) & np.isfinite(d.values)), r.max_m, d.values)
    v = np.clip(np.nan_to_num(v, nan=r.max_m, posinf=r.max_m), r.min_m, r.max_m)
    return DepthMap(v, np.zeros_like(d.missing))


def realism_pipeline(d: DepthMap, r: RangeSpec = RangeSpec(), k: int = 3) -> DepthMap:
    trimmed = trim_range(d, r)
    if trimmed.missing.all():
        return median_filter(requantize(saturate(d, r), r), k)
    return median_filter(inpaint(requantize(trimmed, r), r=r), k)


def normalize_depth_channel(d, r: RangeSpec = RangeSpec()) -> np.ndarray:
    """Linear map of [min_m, max_m] metres onto [0, 255] (real-valued)."""
    v = d.values if isinstance(d, DepthMap) else np.asarray(d, dtype=np.float64)
    return (v - r.min_m) / (r.max_m - r.min_m) * 255.0


def degrade_estimated(d: DepthMap, rng, noise_m: float = 1.5, blur_sigma: float = 1.0,
                      r: RangeSpec = RangeSpec()) -> DepthMap:
    """Emulate monocular depth estimation error on a pipeline-complete map."""
    noise = ndimage.gaussian_filter(rng.normal(0.0, 1.0, d.values.shape), 2.0)
    noise *= noise_m / max(noise.std(), 1e-12)
    v = ndimage.gaussian_filter(d.values, blur_sigma) * (1.0 + 0.02 * noise) + noise
    return DepthMap(np.clip(v, r.min_m, r.max_m), np.zeros_like(d.missing))


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True)
class CropSpec:
    top: float = 0.25
    bottom: float = 0.10

    def __post_init__(self):
        if self.top < 0 or self.bottom < 0 or self.top + self.bottom >= 1:
            raise PipelineError("crop fractions must be >= 0 and sum to < 1")

    def rows(self, height: int) -> tuple[int, int]:
        return int(round(self.top * height)), int(round(self.bottom * height))


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of fractional-overlap weights."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            m[o, i] = min(hi, i + 1) - max(lo, i)
    return m / m.sum(axis=1, keepdims=True)


_AREA_CACHE: dict = {}


def _area(n_in, n_out):
    key = (n_in, n_out)
    if key not in _AREA_CACHE:
        _AREA_CACHE[key] = _area_matrix(n_in, n_out)
    return _AREA_CACHE[key]


def crop_and_downscale(img: np.ndarray, size: tuple[int, int],
                       crop: CropSpec = CropSpec()) -> np.ndarray:
    """Remove top/bottom bands then area-average to ``size = (width, height)``.

    Works on H x W or H x W x C arrays; returns float64.
    """
    img = np.asarray(img, dtype=np.float64)
    h = img.shape[0]
    top, bottom = crop.rows(h)
    band = img[top:h - bottom]
    if band.shape[0] < 1:
        raise PipelineError("crop removes the whole image")
    tw, th = size
    ry = _area(band.shape[0], th)
    rx = _area(band.shape[1], tw)
    if band.ndim == 2:
        out = ry @ band @ rx.T
    else:
        out = np.einsum("yh,hwc,xw->yxc", ry, band, rx, optimize=True)
    # averaging weights sum to 1 only up to rounding; keep the exact range
    return np.clip(out, band.min(axis=(0, 1)), band.max(axis=(0, 1)))


def downscale_labels(labels: np.ndarray, size: tuple[int, int], n_classes: int,
                     crop: CropSpec = CropSpec()) -> np.ndarray:
    """Crop then pick, per output pixel, the class with the largest area share."""
    onehot = np.eye(n_classes)[labels]
    shares = crop_and_downscale(onehot, size, crop)
    return shares.argmax(axis=-1).astype(np.uint8)


# ---------------------------------------------------------------- semantics

# 12-class source taxonomy (simulator order) and the 5-class target
SOURCE_CLASSES = (
    "none", "building", "fence", "other", "pedestrian", "pole",
    "road-line", "road", "sidewalk", "vegetation", "vehicle", "wall",
)
TARGET_CLASSES = ("other", "road-surface", "vehicle", "pedestrian", "lane-limits")
_REMAP = np.zeros(len(SOURCE_CLASSES), dtype=np.uint8)
_REMAP[SOURCE_CLASSES.index("road")] = 1
_REMAP[SOURCE_CLASSES.index("vehicle")] = 2
_REMAP[SOURCE_CLASSES.index("pedestrian")] = 3
_REMAP[SOURCE_CLASSES.index("road-line")] = 4
_REMAP[SOURCE_CLASSES.index("sidewalk")] = 4


def semantic_remap(src: np.ndarray) -> np.ndarray:
    src = np.asarray(src)
    if src.size and (src.min() < 0 or src.max() >= len(SOURCE_CLASSES)):
        bad = src[(src < 0) | (src >= len(SOURCE_CLASSES))].flat[0]
        raise PipelineError(f"semantic_remap: unknown source label {bad}")
    return _REMAP[src.astype(np.intp)]


def one_hot_semantic(labels: np.ndarray) -> np.ndarray:
    """H x W labels in {0..4} -> H x W x 5 channels in {0, 255}."""
    return np.eye(len(TARGET_CLASSES), dtype=np.float32)[labels] * 255.0
