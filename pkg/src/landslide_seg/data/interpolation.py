"""DEM resampling: ordinary Kriging and bilinear interpolation."""
from __future__ import annotations

import warnings
from typing import Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import curve_fit
from scipy.spatial.distance import cdist, pdist
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..validation import DataError


class KrigingError(DataError):
    """Raised when the Kriging system cannot be built or solved."""


def spherical_variogram(h, nugget, sill, range_):
    h = np.asarray(h, dtype=np.float64)
    r = np.minimum(h / range_, 1.0)
    gamma = nugget + sill * (1.5 * r - 0.5 * r ** 3)
    return np.where(h > 0, gamma, 0.0)


def exponential_variogram(h, nugget, sill, range_):
    h = np.asarray(h, dtype=np.float64)
    gamma = nugget + sill * (1.0 - np.exp(-3.0 * h / range_))
    return np.where(h > 0, gamma, 0.0)


VARIOGRAMS = {"spherical": spherical_variogram, "exponential": exponential_variogram}


def empirical_semivariogram(coords, values, n_lags: int = 12, max_pairs: int = 200_000,
                            random_state: Optional[int] = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Binned semivariance ``0.5 * mean((z_i - z_j)**2)`` against lag distance.

    Only lags up to half the maximum pair distance are used. Large inputs
    are subsampled to at most ``max_pairs`` point pairs.
    """
    coords = np.asarray(coords, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n * (n - 1) // 2 > max_pairs:
        rng = np.random.default_rng(random_state)
        i = rng.integers(0, n, size=max_pairs)
        j = rng.integers(0, n, size=max_pairs)
        keep = i != j
        i, j = i[keep], j[keep]
        d = np.linalg.norm(coords[i] - coords[j], axis=1)
        sq = (values[i] - values[j]) ** 2
    else:
        d = pdist(coords)
        sq = pdist(values[:, None], metric="sqeuclidean")
    cutoff = d.max() / 2.0
    edges = np.linspace(0.0, cutoff, n_lags + 1)
    idx = np.digitize(d, edges) - 1
    lags, gammas = [], []
    for k in range(n_lags):
        sel = idx == k
        if np.any(sel):
            lags.append(d[sel].mean())
            gammas.append(0.5 * sq[sel].mean())
    return np.asarray(lags), np.asarray(gammas)


class OrdinaryKriging(BaseEstimator, RegressorMixin):
    """Ordinary Kriging over scattered 2-D sample locations.

    With ``nugget``, ``sill`` and ``range_`` left as ``None`` the variogram
    is fitted by least squares on the empirical semivariogram. The model
    keeps ``gamma(0) = 0`` so it interpolates the samples exactly even when
    the nugget is positive.
    """

    def __init__(self, variogram: str = "spherical", nugget: Optional[float] = None,
                 sill: Optional[float] = None, range_: Optional[float] = None,
                 n_lags: int = 12, chunk_size: int = 8192, random_state: Optional[int] = 0):
        self.variogram = variogram
        self.nugget = nugget
        self.sill = sill
        self.range_ = range_
        self.n_lags = n_lags
        self.chunk_size = chunk_size
        self.random_state = random_state

    def _fit_variogram(self, coords, values):
        model = VARIOGRAMS[self.variogram]
        given = (self.nugget, self.sill, self.range_)
        if all(v is not None for v in given):
            return tuple(float(v) for v in given)
        span = float(pdist(coords).max()) if len(coords) > 1 else 1.0
        lags, gammas = empirical_semivariogram(coords, values, self.n_lags,
                                               random_state=self.random_state)
        if len(lags) < 3 or np.allclose(gammas, 0.0):
            # flat field: any admissible model gives weights summing to one
            return (0.0, 1.0, span / 2.0)
        p0 = [0.0, float(gammas.max()), span / 3.0]
        bounds = ([0.0, 1e-12, 1e-9 * span], [np.inf, np.inf, 10.0 * span])
        try:
            params, _ = curve_fit(model, lags, gammas, p0=p0, bounds=bounds)
        except RuntimeError as exc:
            raise KrigingError(f"variogram fit failed: {exc}") from exc
        fitted = [float(p) for p in params]
        for i, v in enumerate(given):
            if v is not None:
                fitted[i] = float(v)
        return tuple(fitted)

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        if X.ndim != 2 or X.shape[1] != 2 or len(X) != len(y):
            raise KrigingError(f"expected (n, 2) coordinates and n values, got {X.shape}, {y.shape}")
        if self.variogram not in VARIOGRAMS:
            raise KrigingError(f"unknown variogram {self.variogram!r}")
        _, first, counts = np.unique(X, axis=0, return_index=True, return_counts=True)
        if np.any(counts > 1):
            dup = X[np.sort(first[counts > 1])]
            raise KrigingError(
                f"singular Kriging system: duplicate sample coordinates {dup.tolist()}"
            )
        nugget, sill, rng = self._fit_variogram(X, y)
        if not (nugget >= 0 and sill > 0 and rng > 0):
            raise KrigingError(
                f"variogram is not conditionally negative definite "
                f"(nugget={nugget}, sill={sill}, range={rng})"
            )
        self.variogram_params_ = (nugget, sill, rng)
        n = len(y)
        A = np.ones((n + 1, n + 1))
        A[:n, :n] = VARIOGRAMS[self.variogram](cdist(X, X), nugget, sill, rng)
        A[n, n] = 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            try:
                self.lu_ = linalg.lu_factor(A, check_finite=True)
            except (linalg.LinAlgError, ValueError) as exc:
                raise KrigingError(f"singular Kriging system: {exc}") from exc
        diag = np.abs(np.diag(self.lu_[0]))
        if diag.min() <= 1e-14 * diag.max():
            raise KrigingError("singular Kriging system: LU factor has a zero pivot")
        self.X_ = X
        self.mean_ = float(y.mean())
        self.residual_ = y - self.mean_
        return self

    def predict(self, X):
        check_is_fitted(self, "lu_")
        X = np.asarray(X, dtype=np.float64)
        n = len(self.X_)
        model = VARIOGRAMS[self.variogram]
        out = np.empty(len(X))
        for start in range(0, len(X), self.chunk_size):
            q = X[start:start + self.chunk_size]
            b = np.ones((n + 1, len(q)))
            b[:n] = model(cdist(self.X_, q), *self.variogram_params_)
            w = linalg.lu_solve(self.lu_, b)[:n]
            # centred values make constant fields come back bit-exact
            out[start:start + len(q)] = self.mean_ + self.residual_ @ w
        return out


def grid_centres(shape, resolution_m: float) -> np.ndarray:
    """(row, col) -> (x, y) metric coordinates of pixel centres, shape (H*W, 2)."""
    h, w = shape
    ys = (np.arange(h) + 0.5) * resolution_m
    xs = (np.arange(w) + 0.5) * resolution_m
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def interpolate_dem(dem, source_resolution_m: float, target_resolution_m: float,
                    method: str = "kriging", out_shape: Optional[Tuple[int, int]] = None,
                    variogram: str = "spherical", **kriging_params) -> np.ndarray:
    """Resample a coarse DEM onto a finer grid sharing the same top-left origin.

    ``out_shape`` defaults to the number of target pixels covering the source
    extent; pass the optical raster's shape to match it exactly.
    """
    dem = np.asarray(dem, dtype=np.float64)
    if dem.ndim != 2:
        raise DataError(f"dem must be 2-D, got {dem.shape}")
    if not target_resolution_m < source_resolution_m:
        raise DataError(
            f"target resolution {target_resolution_m} m must be finer than source {source_resolution_m} m"
        )
    if out_shape is None:
        out_shape = tuple(int(round(n * source_resolution_m / target_resolution_m)) for n in dem.shape)
    targets = grid_centres(out_shape, target_resolution_m)
    if method == "bilinear":
        ys = (np.arange(dem.shape[0]) + 0.5) * source_resolution_m
        xs = (np.arange(dem.shape[1]) + 0.5) * source_resolution_m
        if dem.shape[0] < 2 or dem.shape[1] < 2:
            raise DataError("bilinear interpolation needs at least a 2x2 source grid")
        # interpolate residuals so a constant field comes back bit-exact
        ref = dem.mean()
        interp = RegularGridInterpolator((ys, xs), dem - ref, method="linear",
                                         bounds_error=False, fill_value=None)
        out = interp(targets[:, ::-1]) + ref
    elif method == "kriging":
        model = OrdinaryKriging(variogram=variogram, **kriging_params)
        model.fit(grid_centres(dem.shape, source_resolution_m), dem.ravel())
        out = model.predict(targets)
    else:
        raise DataError(f"unknown interpolation method {method!r}")
    return out.reshape(out_shape)


class DEMInterpolator(BaseEstimator, TransformerMixin):
    """Transformer wrapper: coarse DEM arrays in, target-grid DEM arrays out."""

    def __init__(self, source_resolution_m: float = 30.0, target_resolution_m: float = 2.0,
                 method: str = "kriging", out_shape: Optional[Tuple[int, int]] = None,
                 variogram: str = "spherical"):
        self.source_resolution_m = source_resolution_m
        self.target_resolution_m = target_resolution_m
        self.method = method
        self.out_shape = out_shape
        self.variogram = variogram

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        stack = X[None] if single else X
        out = np.stack([
            interpolate_dem(d, self.source_resolution_m, self.target_resolution_m,
                            self.method, self.out_shape, self.variogram)
            for d in stack
        ])
        return out[0] if single else out
