"""Scene triples (optical, elevation, label) and their on-disk layout.

A dataset directory holds one sub-directory per scene::

    <root>/<id>/hrsi.tif   3-band 8-bit optical raster
    <root>/<id>/dem.tif    float elevation in meters (any resolution)
    <root>/<id>/label.tif  uint8 mask, 0 background / 1 landslide

PNG is accepted as well: 8-bit RGB for the optical raster and 16-bit
grayscale for the DEM, decoded as ``value * dem_scale + dem_offset``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import tifffile
from PIL import Image

from ..validation import DataError, check_dem, check_hrsi, check_label, check_stride

# GeoTIFF ModelPixelScaleTag
_PIXEL_SCALE_TAG = 33550

DEFAULT_HRSI_RESOLUTION_M = 2.0
DEFAULT_DEM_RESOLUTION_M = 30.0


@dataclass
class SceneSample:
    id: str
    hrsi: np.ndarray
    dem: np.ndarray
    label: np.ndarray
    resolution_m: float = DEFAULT_HRSI_RESOLUTION_M
    dem_resolution_m: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.dem_resolution_m is None:
            self.dem_resolution_m = self.resolution_m
        if self.resolution_m <= 0 or self.dem_resolution_m <= 0:
            raise DataError("resolutions must be positive")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.hrsi.shape[:2]

    @property
    def needs_interpolation(self) -> bool:
        return self.dem.shape != self.label.shape

    def with_arrays(self, **arrays) -> "SceneSample":
        return replace(self, **arrays)


def _read_raster(path: Path) -> Tuple[np.ndarray, Optional[float]]:
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        with tifffile.TiffFile(path) as tif:
            page = tif.pages[0]
            arr = page.asarray()
            res = None
            tag = page.tags.get(_PIXEL_SCALE_TAG)
            if tag is not None:
                res = float(tag.value[0])
        return arr, res
    if suffix == ".png":
        with Image.open(path) as img:
            if img.mode in ("I;16", "I;16B", "I"):
                arr = np.array(img, dtype=np.uint16)
            else:
                arr = np.array(img)
        return arr, None
    if suffix == ".npy":
        return np.load(path), None
    raise DataError(f"unsupported raster format {path.suffix!r} for {path}")


def _write_tiff(path: Path, arr: np.ndarray, resolution_m: float) -> None:
    tifffile.imwrite(
        path,
        arr,
        photometric="rgb" if arr.ndim == 3 else "minisblack",
        extratags=[(_PIXEL_SCALE_TAG, "d", 3, (resolution_m, resolution_m, 0.0), True)],
    )


def load_scene(hrsi_path, dem_path, label_path, *, sample_id: Optional[str] = None,
               hrsi_resolution_m: Optional[float] = None, dem_resolution_m: Optional[float] = None,
               dem_scale: float = 1.0, dem_offset: float = 0.0, stride: int = 8) -> SceneSample:
    """Read an aligned optical/elevation/label triple.

    The DEM is kept at its native resolution; when its grid is coarser than
    the optical grid the returned sample reports ``needs_interpolation``.
    Resolutions come from GeoTIFF pixel-scale tags when present, then from
    the keyword arguments, then from the 2 m / 30 m defaults.
    """
    paths = [Path(hrsi_path), Path(dem_path), Path(label_path)]
    for p in paths:
        if not p.is_file():
            raise DataError(f"missing raster file: {p}")
    hrsi_raw, hrsi_res = _read_raster(paths[0])
    dem_raw, dem_res = _read_raster(paths[1])
    label_raw, _ = _read_raster(paths[2])

    if hrsi_raw.ndim == 3 and hrsi_raw.shape[-1] == 4:
        hrsi_raw = hrsi_raw[..., :3]
    hrsi = check_hrsi(hrsi_raw)
    label = check_label(label_raw)
    if paths[1].suffix.lower() == ".png":
        dem_raw = dem_raw.astype(np.float64) * dem_scale + dem_offset
    dem = check_dem(dem_raw)

    if label.shape != hrsi.shape[:2]:
        raise DataError(f"dimension mismatch: label {label.shape} vs hrsi {hrsi.shape[:2]}")
    check_stride(hrsi.shape, stride, "hrsi")

    res = hrsi_res or hrsi_resolution_m or DEFAULT_HRSI_RESOLUTION_M
    if dem.shape == hrsi.shape[:2]:
        dres = dem_res or dem_resolution_m or res
    else:
        dres = dem_res or dem_resolution_m or DEFAULT_DEM_RESOLUTION_M
        expected = tuple(math.ceil(n * res / dres - 1e-9) for n in hrsi.shape[:2])
        if dem.shape != expected:
            raise DataError(
                f"dimension mismatch: dem {dem.shape} at {dres} m does not cover hrsi "
                f"{hrsi.shape[:2]} at {res} m (expected {expected})"
            )
    return SceneSample(
        id=sample_id or paths[0].parent.name,
        hrsi=hrsi,
        dem=dem,
        label=label,
        resolution_m=float(res),
        dem_resolution_m=float(dres),
    )


def write_scene(sample: SceneSample, root) -> Path:
    out = Path(root) / sample.id
    out.mkdir(parents=True, exist_ok=True)
    _write_tiff(out / "hrsi.tif", np.ascontiguousarray(sample.hrsi), sample.resolution_m)
    _write_tiff(out / "dem.tif", np.ascontiguousarray(sample.dem.astype(np.float32)),
                sample.dem_resolution_m)
    _write_tiff(out / "label.tif", np.ascontiguousarray(sample.label.astype(np.uint8)),
                sample.resolution_m)
    return out


def _find(directory: Path, stem: str) -> Path:
    for suffix in (".tif", ".tiff", ".png", ".npy"):
        p = directory / f"{stem}{suffix}"
        if p.is_file():
            return p
    raise DataError(f"missing {stem}.* in {directory}")


def list_scene_ids(root) -> List[str]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    return sorted(p.name for p in root.iterdir() if p.is_dir() and (p / "label.tif").exists()
                  or p.is_dir() and (p / "label.png").exists())


def load_dataset(root, **kwargs) -> List[SceneSample]:
    root = Path(root)
    samples = []
    for sid in list_scene_ids(root):
        d = root / sid
        samples.append(load_scene(_find(d, "hrsi"), _find(d, "dem"), _find(d, "label"),
                                  sample_id=sid, **kwargs))
    if not samples:
        raise DataError(f"no scenes found under {root}")
    return samples
