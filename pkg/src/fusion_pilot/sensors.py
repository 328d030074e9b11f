"""Turn raw camera output into network-ready perception channels.

The same function serves dataset preprocessing and closed-loop driving, so
a model sees identical input statistics in both.
"""

from __future__ import annotations

import numpy as np

from . import depth as dp


def process_views(rgb=None, depth_m=None, sem_raw=None, *, size=(48, 24), modalities=("rgb", "depth", "ss"),
                  r: dp.RangeSpec = dp.RangeSpec(), crop: dp.CropSpec = dp.CropSpec()) -> dict:
    """Return ``{modality: H x W x C float array in [0, 255]}`` for the requested modalities."""
    out = {}
    if "rgb" in modalities:
        # rounded exactly as the preprocessed dataset stores it
        out["rgb"] = np.round(dp.crop_and_downscale(rgb, size, crop))
    if "depth" in modalities:
        d = dp.realism_pipeline(dp.DepthMap(depth_m), r)
        chan = dp.normalize_depth_channel(dp.crop_and_downscale(d.values, size, crop), r)
        out["depth"] = chan.astype(np.float16).astype(np.float64)[..., None]
    if "ss" in modalities:
        labels = dp.downscale_labels(dp.semantic_remap(sem_raw), size, len(dp.TARGET_CLASSES), crop)
        out["ss"] = dp.one_hot_semantic(labels).astype(np.float64)
    return out


def depth_to_png_units(depth_m: np.ndarray, step: float = dp.RangeSpec().step_m) -> np.ndarray:
    """Metres to 16-bit sensor counts of ``step`` metres (saturating)."""
    return np.clip(np.round(np.asarray(depth_m) / step), 0, 65535).astype(np.uint16)


def png_units_to_depth(units: np.ndarray, step: float = dp.RangeSpec().step_m) -> np.ndarray:
    return units.astype(np.float64) * step
