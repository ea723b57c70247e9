"""scikit-learn style classifier around the decoder and its uncertainty estimate."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .augment import AugmentConfig, train_uncer
from .decoder import DecoderConfig, build_decoder, predict_logits, softmax, train
from .datasets import SegmentSet
from .rng import RngStream
from .uncertainty import UncertaintyConfig, estimate


class UncerClassifier(ClassifierMixin, BaseEstimator):
    """Decoder for segments ``X`` of shape ``(n, channels, samples)``.

    ``augment=True`` trains with meta-learned augmentation instead of plain
    cross-entropy. ``predict_uncertainty`` returns the MC-dropout/ADF report.
    """

    def __init__(self, temporal_filters=8, depth_multiplier=2, pointwise_filters=16, temporal_kernel=64,
                 pool_size=8, dropout_rate_train=0.25, epochs=40, lr=1e-3, batch_size=64, n_passes=200,
                 phi=0.1, input_noise=0.1, augment=False, lam=15.0, seed=0):
        self.temporal_filters = temporal_filters
        self.depth_multiplier = depth_multiplier
        self.pointwise_filters = pointwise_filters
        self.temporal_kernel = temporal_kernel
        self.pool_size = pool_size
        self.dropout_rate_train = dropout_rate_train
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.n_passes = n_passes
        self.phi = phi
        self.input_noise = input_noise
        self.augment = augment
        self.lam = lam
        self.seed = seed

    def _check_x(self, X, fitted=True):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 4 and X.shape[2] == 1:
            X = X[:, :, 0, :]
        if X.ndim != 3:
            raise ValueError(f"expected X shaped (n, channels, samples), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite values")
        if fitted and X.shape[1:] != self.input_shape_:
            raise ValueError(f"X has segment shape {X.shape[1:]}, estimator was fitted on {self.input_shape_}")
        return X

    def fit(self, X, y):
        X = self._check_x(X, fitted=False)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} segments but y has {len(y)} labels")
        check_classification_targets(y)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.input_shape_ = X.shape[1:]
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        cfg = DecoderConfig(n_channels=X.shape[1], n_samples=X.shape[2], n_classes=len(self.classes_),
                            temporal_filters=self.temporal_filters, depth_multiplier=self.depth_multiplier,
                            pointwise_filters=self.pointwise_filters, temporal_kernel=self.temporal_kernel,
                            pool_size=self.pool_size, dropout_rate_train=self.dropout_rate_train)
        root = RngStream(self.seed)
        model = build_decoder(cfg, root.child("init"))
        data = SegmentSet(X, yi, np.zeros(len(yi), dtype=np.int64), np.arange(len(yi)), X.shape[2], 1,
                          len(self.classes_))
        if self.augment:
            model, self.controller_, self.history_ = train_uncer(
                model, None, data, AugmentConfig(inner_lr=self.lr, lam=self.lam), self.epochs, root.child("train"),
                batch_size=self.batch_size)
        else:
            model, self.history_ = train(model, data, None, self.epochs, self.lr, self.batch_size,
                                         root.child("train"))
        self.model_ = model
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, self._check_x(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def uncertainty_config(self) -> UncertaintyConfig:
        return UncertaintyConfig(n_passes=self.n_passes, phi=self.phi, input_noise=self.input_noise, seed=self.seed)

    def predict_uncertainty(self, X, y=None):
        """Uncertainty report; with ``y`` the report carries the mean NLL."""
        check_is_fitted(self, "model_")
        labels = None
        if y is not None:
            y = np.asarray(y)
            unknown = ~np.isin(y, self.classes_)
            if unknown.any():
                raise ValueError(f"labels {np.unique(y[unknown]).tolist()} were not seen during fit")
            labels = np.searchsorted(self.classes_, y)
        return estimate(self.model_, self._check_x(X), self.uncertainty_config(), labels)
