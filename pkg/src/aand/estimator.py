"""scikit-learn style wrapper around the two-stage pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from . import scoring
from .trainer import (AANDModel, TrainConfig, checkpoint_extras, load_checkpoint, save_checkpoint,
                      synthesize_training_anomalies, train_stage1, train_stage2)


def check_images(X, channels: int | None = None, size: int | None = None) -> np.ndarray:
    """Validate an image batch and return it as float32 (N, C, H, W).

    (N, H, W) input is treated as single-channel.
    """
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, C, H, W) or (N, H, W), got {X.shape}")
    if len(X) == 0:
        raise ValueError("empty image batch")
    if X.shape[-1] != X.shape[-2]:
        raise ValueError(f"images must be square, got {X.shape[-2]}x{X.shape[-1]}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[1]}")
    if size is not None and X.shape[-1] != size:
        raise ValueError(f"expected {size}x{size} images, got {X.shape[-2]}x{X.shape[-1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    return X.astype(np.float32, copy=False)


class AANDDetector(OutlierMixin, BaseEstimator):
    """Anomaly detector trained on normal images only.

    ``fit`` synthesizes corrupted copies of the training images for the
    amplification stage, then distils the student on the clean images.
    ``transform`` returns pixel anomaly maps, ``score_samples`` the image
    scores (higher = more anomalous) and ``predict`` returns -1 for
    anomalies and 1 for normal images, thresholded at the
    ``threshold_percentile`` of the training scores.
    """

    def __init__(self, stage1_epochs=20, stage2_epochs=24, batch_size=8, lr=0.005, alpha=0.3, k_hard=10,
                 n_memory=50, channels=(16, 32, 64), use_raa=True, use_hkd=True, smoothing=False,
                 threshold_percentile=95.0, seed=0, teacher_seed=0):
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.alpha = alpha
        self.k_hard = k_hard
        self.n_memory = n_memory
        self.channels = channels
        self.use_raa = use_raa
        self.use_hkd = use_hkd
        self.smoothing = smoothing
        self.threshold_percentile = threshold_percentile
        self.seed = seed
        self.teacher_seed = teacher_seed

    def _config(self, X: np.ndarray) -> TrainConfig:
        return TrainConfig(image_size=X.shape[-1], in_channels=X.shape[1], channels=tuple(self.channels),
                           n_memory=self.n_memory, stage1_epochs=self.stage1_epochs,
                           stage2_epochs=self.stage2_epochs, batch_size=self.batch_size, lr=self.lr,
                           alpha=self.alpha, k_hard=self.k_hard, use_raa=self.use_raa, use_hkd=self.use_hkd,
                           smoothing=self.smoothing, seed=self.seed,
                           teacher_seed=self.teacher_seed)

    def fit(self, X, y=None):
        X = check_images(X)
        if y is not None and np.any(np.asarray(y) != 0):
            raise ValueError("fit expects normal images only (all labels 0)")
        cfg = self._config(X)
        model = AANDModel(cfg)
        if cfg.use_raa:
            images, masks = synthesize_training_anomalies(X, cfg)
            self.stage1_history_ = train_stage1(model, images, masks).history
        else:
            self.stage1_history_ = []
        self.stage2_history_ = train_stage2(model, X).history
        self.model_ = model
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.threshold_ = float(np.percentile(self.score_samples(X), self.threshold_percentile))
        return self

    def _checked(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        cfg = self.model_.cfg
        return check_images(X, cfg.in_channels, cfg.image_size)

    def transform(self, X) -> np.ndarray:
        """(N, H, W) anomaly maps."""
        X = self._checked(X)
        adv = self.model_.advanced_features(X)
        return scoring.anomaly_maps(adv, self.model_.student_features(adv), X.shape[-2:], self.model_.cfg.smoothing)

    def score_samples(self, X) -> np.ndarray:
        return np.atleast_1d(scoring.image_score(self.transform(X)))

    def decision_function(self, X) -> np.ndarray:
        """Negative for anomalies, following the scikit-learn outlier convention."""
        return self.threshold_ - self.score_samples(X)

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) < 0, -1, 1)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, extra={"threshold": np.array([self.threshold_])})

    @classmethod
    def load(cls, path) -> "AANDDetector":
        model, _ = load_checkpoint(path)
        cfg = model.cfg
        det = cls(stage1_epochs=cfg.stage1_epochs, stage2_epochs=cfg.stage2_epochs, batch_size=cfg.batch_size,
                  lr=cfg.lr, alpha=cfg.alpha, k_hard=cfg.k_hard, n_memory=cfg.n_memory, channels=cfg.channels,
                  use_raa=cfg.use_raa, use_hkd=cfg.use_hkd, smoothing=cfg.smoothing, seed=cfg.seed,
                  teacher_seed=cfg.teacher_seed)
        det.model_ = model
        det.n_features_in_ = cfg.in_channels * cfg.image_size ** 2
        extras = checkpoint_extras(path)
        det.threshold_ = float(extras["threshold"].ravel()[0]) if "threshold" in extras else np.inf
        return det
