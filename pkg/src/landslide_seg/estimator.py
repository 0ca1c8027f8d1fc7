"""scikit-learn style wrapper around :class:`~landslide_seg.training.Trainer`."""
from __future__ import annotations

import copy
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .config import ContrastiveConfig, Hyperparameters, LossConfig, NetworkConfig, RunConfig
from .data.preprocess import equalize_histogram
from .data.scene import SceneSample
from .metrics import ConfusionCounts, accumulate_confusion, compute_metrics
from .training import Trainer, dem_to_tensor, hrsi_to_tensor
from .validation import check_scene_batch


def _samples_from_arrays(X: np.ndarray, y: Optional[np.ndarray], prefix: str, equalize: bool):
    samples = []
    for i in range(X.shape[0]):
        hrsi = np.rint(X[i, ..., :3]).astype(np.uint8)
        if equalize:
            hrsi = equalize_histogram(hrsi)
        label = y[i] if y is not None else np.zeros(X.shape[1:3], np.uint8)
        samples.append(SceneSample(id=f"{prefix}{i}", hrsi=hrsi, dem=X[i, ..., 3], label=label))
    return samples


class LandslideSegmenter(BaseEstimator, ClassifierMixin):
    """Pixelwise landslide/background segmenter trained with hyper-pixel contrast.

    ``X`` is an array of shape (n, H, W, 4): three 8-bit optical bands and
    the DEM in meters resampled to the optical grid. ``y`` is (n, H, W)
    with 0 for background and 1 for landslide. H and W must be multiples
    of 8.

    ``beta=0`` disables the contrastive term; queues and the momentum
    encoder are still maintained.
    """

    def __init__(self, network: Optional[NetworkConfig] = None,
                 contrastive: Optional[ContrastiveConfig] = None, alpha: float = 1.0,
                 beta: float = 0.1, epochs: int = 100, batch_size: int = 2,
                 learning_rate: float = 0.007, weight_decay: float = 0.007,
                 sgd_momentum: float = 0.9, poly_power: float = 0.9, equalize: bool = True,
                 precision: int = 32, random_state: int = 0):
        self.network = network
        self.contrastive = contrastive
        self.alpha = alpha
        self.beta = beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.sgd_momentum = sgd_momentum
        self.poly_power = poly_power
        self.equalize = equalize
        self.precision = precision
        self.random_state = random_state

    def _run_config(self, size) -> RunConfig:
        net = copy.deepcopy(self.network) if self.network is not None else NetworkConfig()
        net.input_size = tuple(size)
        con = copy.deepcopy(self.contrastive) if self.contrastive is not None else ContrastiveConfig(
            D=net.projection_dim)
        cfg = RunConfig(
            precision=self.precision,
            network=net,
            contrastive=con,
            loss=LossConfig(alpha=self.alpha, beta=self.beta),
            train=Hyperparameters(batch_size=self.batch_size, epochs=self.epochs,
                                  initial_lr=self.learning_rate, weight_decay=self.weight_decay,
                                  sgd_momentum=self.sgd_momentum, poly_power=self.poly_power,
                                  seed=self.random_state, augment=False, equalize=self.equalize),
        )
        cfg.synthetic.size = tuple(size)
        cfg.validate()
        return cfg

    def fit(self, X, y):
        X, y = check_scene_batch(X, y)
        cfg = self._run_config(X.shape[1:3])
        samples = _samples_from_arrays(X, y, "fit", self.equalize)
        self.trainer_ = Trainer(cfg)
        self.trainer_.fit(samples, (), self.epochs)
        self.classes_ = np.array([0, 1])
        self.history_ = self.trainer_.history
        return self

    def _tensors(self, X):
        X = check_scene_batch(X)
        samples = _samples_from_arrays(X, None, "x", self.equalize)
        dtype = self.trainer_.dtype
        hrsi = torch.stack([hrsi_to_tensor(s.hrsi, dtype) for s in samples])
        dem = torch.stack([dem_to_tensor(s.dem, dtype) for s in samples])
        return samples, hrsi, dem

    def predict_proba(self, X):
        """Per-pixel class probabilities, shape (n, H, W, 2)."""
        check_is_fitted(self, "trainer_")
        samples, _, _ = self._tensors(X)
        p = self.trainer_.predict_proba(samples)
        return np.stack([1.0 - p, p], axis=-1)

    def predict(self, X):
        return (self.predict_proba(X)[..., 1] > 0.5).astype(np.uint8)

    @torch.no_grad()
    def transform(self, X):
        """Unit-norm projection embeddings, shape (n, D, H/8, W/8)."""
        check_is_fitted(self, "trainer_")
        _, hrsi, dem = self._tensors(X)
        model = self.trainer_.model.eval()
        return model.projection(model.encoder(hrsi, dem).fused).cpu().numpy()

    def score(self, X, y, sample_weight=None):
        """Micro-averaged mIoU over all pixels of ``X``."""
        X, y = check_scene_batch(X, y)
        pred = self.predict(X)
        counts = ConfusionCounts()
        for p, t in zip(pred, y):
            counts = accumulate_confusion(p, t, counts)
        return compute_metrics(counts).miou
