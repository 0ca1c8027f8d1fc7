"""Procedural terrain scenes with horseshoe-shaped landslide scarps.

Elevation is fractal gradient noise on a regional slope. Each landslide is
carved as a depression whose upslope rim (back and side walls) drops by the
scarp depth within three pixels, fading out toward the open toe. The optical
raster is a hill-shaded rendering tinted with a vegetation/soil texture.
"""
from __future__ import annotations

import math
from dataclasses import replace
from typing import List, Optional

import numpy as np
from scipy import ndimage

from ..config import ConfigError, ContrastiveConfig, SyntheticTerrainConfig
from .scene import SceneSample

MAX_ATTEMPTS = 60

_VEGETATION = np.array([0.36, 0.50, 0.24])
_SOIL = np.array([0.66, 0.55, 0.40])


def gradient_noise(shape, cells: int, rng: np.random.Generator) -> np.ndarray:
    """Single-octave Perlin noise with ``cells`` lattice cells across the short side."""
    h, w = shape
    scale = cells / min(h, w)
    gy, gx = int(math.ceil(h * scale)) + 2, int(math.ceil(w * scale)) + 2
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(gy, gx))
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    y = (np.arange(h) + 0.5) * scale
    x = (np.arange(w) + 0.5) * scale
    Y, X = np.meshgrid(y, x, indexing="ij")
    y0, x0 = np.floor(Y).astype(int), np.floor(X).astype(int)
    fy, fx = Y - y0, X - x0

    def dot(oy, ox):
        g = grads[y0 + oy, x0 + ox]
        return g[..., 0] * (fx - ox) + g[..., 1] * (fy - oy)

    def fade(t):
        return t * t * t * (t * (t * 6 - 15) + 10)

    u, v = fade(fx), fade(fy)
    top = dot(0, 0) * (1 - u) + dot(0, 1) * u
    bottom = dot(1, 0) * (1 - u) + dot(1, 1) * u
    return top * (1 - v) + bottom * v


def fractal_noise(shape, octaves: int, rng: np.random.Generator, base_cells: int = 2,
                  persistence: float = 0.5) -> np.ndarray:
    total = np.zeros(shape)
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        total += amp * gradient_noise(shape, base_cells * 2 ** o, rng)
        norm += amp
        amp *= persistence
    return total / norm


def hillshade(elevation: np.ndarray, resolution_m: float, azimuth_deg: float = 315.0,
              altitude_deg: float = 45.0) -> np.ndarray:
    dy, dx = np.gradient(elevation, resolution_m)
    slope = np.arctan(np.hypot(dx, dy))
    aspect = np.arctan2(-dx, dy)
    az = np.deg2rad(360.0 - azimuth_deg + 90.0)
    alt = np.deg2rad(altitude_deg)
    shade = np.sin(alt) * np.cos(slope) + np.cos(alt) * np.sin(slope) * np.cos(az - aspect)
    return np.clip(shade, 0.0, 1.0)


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def carve_scarp(elevation: np.ndarray, center, radii, downslope: np.ndarray, depth: float,
                rim_px: float = 3.0):
    """Depress an elliptical region; return (new elevation, region mask).

    The depression reaches full depth ``rim_px`` pixels inside the upslope
    rim and tapers to a quarter of it at the downslope toe.
    """
    h, w = elevation.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    along = dx * downslope[0] + dy * downslope[1]
    across = -dx * downslope[1] + dy * downslope[0]
    r = np.sqrt((along / radii[0]) ** 2 + (across / radii[1]) ** 2)
    mask = r < 1.0
    inside_dist = ndimage.distance_transform_edt(mask)
    edge = _smoothstep(inside_dist / rim_px)
    t = np.clip(along / radii[0], -1.0, 1.0)
    taper = 1.0 - 0.75 * _smoothstep((t + 0.2) / 1.2)
    out = elevation - depth * edge * taper * mask
    return out, mask


def _render_optical(elevation, label, cfg: SyntheticTerrainConfig, rng) -> np.ndarray:
    shade = hillshade(elevation, cfg.resolution_m)
    texture = fractal_noise(elevation.shape, 3, rng, base_cells=8)
    veg = np.clip(0.65 + cfg.vegetation_texture_strength * texture, 0.0, 1.0)
    veg = np.where(label > 0, veg * 0.8, veg)
    color = veg[..., None] * _VEGETATION + (1.0 - veg[..., None]) * _SOIL
    rgb = (0.35 + 0.65 * shade)[..., None] * color
    speckle = rng.normal(0.0, 0.02, size=rgb.shape)
    return np.clip(np.rint((rgb + speckle) * 255.0), 0, 255).astype(np.uint8)


def coarsen_dem(dem: np.ndarray, resolution_m: float, native_resolution_m: float) -> np.ndarray:
    """Area-average a fine DEM onto a coarser grid sharing its top-left origin.

    Each fine pixel votes into the coarse cell holding its centre; coarse
    cells that receive no pixel copy their nearest filled neighbour.
    """
    factor = native_resolution_m / resolution_m
    out_shape = tuple(math.ceil(n / factor - 1e-9) for n in dem.shape)
    rows = np.minimum(((np.arange(dem.shape[0]) + 0.5) / factor).astype(int), out_shape[0] - 1)
    cols = np.minimum(((np.arange(dem.shape[1]) + 0.5) / factor).astype(int), out_shape[1] - 1)
    sums = np.zeros(out_shape)
    counts = np.zeros(out_shape)
    np.add.at(sums, (rows[:, None], cols[None, :]), dem)
    np.add.at(counts, (rows[:, None], cols[None, :]), 1.0)
    filled = counts > 0
    out = np.where(filled, sums / np.maximum(counts, 1.0), 0.0)
    if not filled.all():
        _, (iy, ix) = ndimage.distance_transform_edt(~filled, return_indices=True)
        out = out[iy, ix]
    return out


def _attempt(cfg: SyntheticTerrainConfig, rng: np.random.Generator):
    h, w = cfg.size
    base = fractal_noise((h, w), cfg.noise_octaves, rng)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    downslope = np.array([math.cos(phi), math.sin(phi)])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ramp = ((xx - w / 2) * downslope[0] + (yy - h / 2) * downslope[1]) / max(h, w)
    elevation = 1000.0 + cfg.relief_m * base - cfg.regional_slope_m * ramp
    label = np.zeros((h, w), dtype=np.uint8)
    n_scarps = int(rng.integers(cfg.scarp_count[0], cfg.scarp_count[1] + 1))
    short = min(h, w)
    placed = 0
    for _ in range(n_scarps * 20):
        if placed == n_scarps:
            break
        ra = rng.uniform(*cfg.radius_px) * short
        rb = ra * rng.uniform(0.7, 0.9)
        margin = ra + 4
        if 2 * margin >= short:
            raise ConfigError(f"scarp radius {ra:.1f} px does not fit in a {h}x{w} scene")
        center = (rng.uniform(margin, h - margin), rng.uniform(margin, w - margin))
        jitter = rng.normal(0.0, 0.25)
        d = np.array([math.cos(phi + jitter), math.sin(phi + jitter)])
        depth = rng.uniform(*cfg.scarp_depth_m)
        carved, mask = carve_scarp(elevation, center, (ra, rb), d, depth)
        if np.any(ndimage.binary_dilation(mask, iterations=4) & (label > 0)):
            continue
        elevation = carved
        label[mask] = 1
        placed += 1
    return elevation, label, placed


def generate_synthetic_scene(config: SyntheticTerrainConfig, sample_id: Optional[str] = None,
                             contrastive: Optional[ContrastiveConfig] = None) -> SceneSample:
    """Deterministic scene for ``config.seed``.

    Scenes with scarps are redrawn (from the same seeded stream) until the
    anchor candidate rule yields at least ``config.min_candidates``
    landslide hyper-pixels.
    """
    from ..contrastive import enumerate_candidates

    config.validate()
    rng = np.random.default_rng(config.seed)
    ccfg = contrastive or ContrastiveConfig()
    for _ in range(MAX_ATTEMPTS):
        elevation, label, placed = _attempt(config, rng)
        if placed == 0 and config.scarp_count[1] > 0:
            continue
        if placed:
            found = len(enumerate_candidates(label, elevation, ccfg).landslide)
            if found < config.min_candidates:
                continue
        break
    else:
        raise ConfigError(
            f"could not place scarps yielding {config.min_candidates} candidates "
            f"after {MAX_ATTEMPTS} attempts; enlarge size or radius_px"
        )
    hrsi = _render_optical(elevation, label, config, rng)
    dem = elevation
    dem_res = config.resolution_m
    if config.native_dem_resolution_m:
        dem = coarsen_dem(elevation, config.resolution_m, config.native_dem_resolution_m)
        dem_res = config.native_dem_resolution_m
    return SceneSample(
        id=sample_id or f"syn{config.seed:05d}",
        hrsi=hrsi,
        dem=dem,
        label=label,
        resolution_m=config.resolution_m,
        dem_resolution_m=dem_res,
        meta={"scarps": placed},
    )


def generate_synthetic_dataset(n: int, config: SyntheticTerrainConfig,
                               contrastive: Optional[ContrastiveConfig] = None) -> List[SceneSample]:
    """``n`` scenes seeded ``config.seed, config.seed + 1, ...``."""
    return [generate_synthetic_scene(replace(config, seed=config.seed + i), contrastive=contrastive)
            for i in range(n)]
