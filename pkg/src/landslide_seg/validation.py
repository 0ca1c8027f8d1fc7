"""Input validation helpers shared by the estimators and the data layer."""
from __future__ import annotations

import numpy as np


class DataError(ValueError):
    """Raised for malformed rasters, labels or dataset layouts."""


def check_label(label, name: str = "label") -> np.ndarray:
    label = np.asarray(label)
    if label.ndim == 3 and label.shape[-1] == 1:
        label = label[..., 0]
    if label.ndim != 2:
        raise DataError(f"{name} must be 2-D, got shape {label.shape}")
    values = np.unique(label)
    bad = values[(values != 0) & (values != 1)]
    if bad.size:
        raise DataError(f"invalid label value(s) {bad.tolist()} in {name}; expected 0 or 1")
    return label.astype(np.uint8)


def check_hrsi(hrsi, name: str = "hrsi") -> np.ndarray:
    hrsi = np.asarray(hrsi)
    if hrsi.ndim != 3 or hrsi.shape[-1] != 3:
        raise DataError(f"{name} must be H x W x 3, got shape {hrsi.shape}")
    if hrsi.dtype != np.uint8:
        if np.issubdtype(hrsi.dtype, np.integer) or np.issubdtype(hrsi.dtype, np.floating):
            if hrsi.min() < 0 or hrsi.max() > 255:
                raise DataError(f"{name} values must lie in [0, 255]")
            hrsi = np.rint(hrsi).astype(np.uint8)
        else:
            raise DataError(f"{name} has unsupported dtype {hrsi.dtype}")
    return hrsi


def check_dem(dem, name: str = "dem") -> np.ndarray:
    dem = np.asarray(dem, dtype=np.float64)
    if dem.ndim == 3 and dem.shape[-1] == 1:
        dem = dem[..., 0]
    if dem.ndim != 2:
        raise DataError(f"{name} must be 2-D, got shape {dem.shape}")
    if not np.all(np.isfinite(dem)):
        raise DataError(f"{name} contains non-finite elevations")
    return dem


def check_stride(shape, stride: int = 8, name: str = "raster") -> None:
    h, w = shape[:2]
    if h % stride or w % stride:
        raise DataError(f"{name} size {h}x{w} is not a multiple of the stride {stride}")


def check_scene_batch(X, y=None, stride: int = 8):
    """Validate the stacked array layout used by the estimator API.

    ``X`` has shape (n, H, W, 4): three 8-bit optical bands followed by the
    elevation in meters. ``y`` has shape (n, H, W) with values in {0, 1}.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 4:
        raise DataError(f"X must have shape (n, H, W, 4), got {X.shape}")
    if X.shape[0] == 0:
        raise DataError("X holds no samples")
    check_stride(X.shape[1:3], stride, "X")
    if not np.all(np.isfinite(X)):
        raise DataError("X contains non-finite values")
    if X[..., :3].min() < 0 or X[..., :3].max() > 255:
        raise DataError("optical bands of X must lie in [0, 255]")
    if y is None:
        return X
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != X.shape[:3]:
        raise DataError(f"y shape {y.shape} does not match X spatial shape {X.shape[:3]}")
    for i in range(y.shape[0]):
        check_label(y[i], name=f"y[{i}]")
    return X, y.astype(np.uint8)
