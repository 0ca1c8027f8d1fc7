"""Histogram equalization and joint geometric augmentation."""
from __future__ import annotations

from typing import Callable, Dict, List

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ..validation import DataError, check_hrsi
from .scene import SceneSample


def equalization_lut(channel: np.ndarray) -> np.ndarray:
    """256-entry lookup table ``floor(cdf(v) / N * 255)`` for one 8-bit channel.

    The CDF is inclusive, so the most frequent top level always maps to 255
    and a single-valued channel maps entirely to 255.
    """
    hist = np.bincount(channel.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    return (cdf * 255 // cdf[-1]).astype(np.uint8)


def equalize_histogram(hrsi) -> np.ndarray:
    hrsi = check_hrsi(hrsi)
    out = np.empty_like(hrsi)
    for c in range(hrsi.shape[-1]):
        out[..., c] = equalization_lut(hrsi[..., c])[hrsi[..., c]]
    return out


class HistogramEqualizer(BaseEstimator, TransformerMixin):
    """Per-image, per-channel histogram equalization of (n, H, W, 3) stacks."""

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X)
        if X.ndim == 3:
            return equalize_histogram(X)
        return np.stack([equalize_histogram(x) for x in X])


def _hflip(a):
    return a[:, ::-1]


def _vflip(a):
    return a[::-1]


def _rot(k):
    return lambda a: np.rot90(a, k, axes=(0, 1))


# order of the returned list
TRANSFORMS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "original": lambda a: a,
    "hflip": _hflip,
    "vflip": _vflip,
    "rot90": _rot(1),
    "rot180": _rot(2),
    "rot270": _rot(3),
}


def apply_transform(sample: SceneSample, name: str) -> SceneSample:
    fn = TRANSFORMS[name]
    if name in ("rot90", "rot270") and sample.label.shape[0] != sample.label.shape[1]:
        raise DataError(f"{name} needs square rasters, got {sample.label.shape}")
    if sample.needs_interpolation:
        raise DataError("interpolate the DEM before augmenting")
    suffix = "" if name == "original" else f"_{name}"
    return sample.with_arrays(
        id=f"{sample.id}{suffix}",
        hrsi=np.ascontiguousarray(fn(sample.hrsi)),
        dem=np.ascontiguousarray(fn(sample.dem)),
        label=np.ascontiguousarray(fn(sample.label)),
    )


def augment(sample: SceneSample) -> List[SceneSample]:
    """Original plus h-flip, v-flip and 90/180/270 degree rotations."""
    return [apply_transform(sample, name) for name in TRANSFORMS]


def prepare_sample(sample: SceneSample, *, equalize: bool = True, method: str = "kriging",
                   **kriging_params) -> SceneSample:
    """Interpolate the DEM onto the optical grid (if needed) and equalize.

    Equalization runs before augmentation; flips and rotations permute pixels
    so the order does not change the histogram.
    """
    from .interpolation import interpolate_dem

    dem = sample.dem
    if sample.needs_interpolation:
        dem = interpolate_dem(dem, sample.dem_resolution_m, sample.resolution_m, method,
                              out_shape=sample.label.shape, **kriging_params)
    hrsi = equalize_histogram(sample.hrsi) if equalize else sample.hrsi
    return sample.with_arrays(hrsi=hrsi, dem=dem, dem_resolution_m=sample.resolution_m)
