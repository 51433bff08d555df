"""scikit-learn compatible wrapper around network construction and training."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from . import ops
from .analysis import count_network
from .arch import NetworkSpec, builtin_spec, build_network
from .data import Dataset, channel_stats
from .tensor import make_rng
from .train import TrainConfig, train


def _as_images(X, n_features=None):
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim == 2:
        side = int(round(np.sqrt(X.shape[1] / 3)))
        if 3 * side * side != X.shape[1]:
            raise ValueError(f"cannot reshape {X.shape[1]} features into (3, H, H) images")
        X = X.reshape(X.shape[0], 3, side, side)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) images, got shape {X.shape}")
    if n_features is not None and X[0].size != n_features:
        raise ValueError(f"X has {X[0].size} features per sample, expected {n_features}")
    return X


class DPDNetClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier backed by one of the built-in networks.

    ``X`` is either (N, 3, H, W) or flattened (N, 3*H*W) images with values
    in [0, 1]; per-channel normalisation statistics are learned in ``fit``.
    Pass ``spec`` to train a custom :class:`~dpdnet.arch.NetworkSpec`
    instead of ``arch`` / ``alpha`` / ``m``; its class count must match y.
    """

    def __init__(self, arch="dpdnet_cifar", alpha=1.0, m=1, spec=None, epochs=300,
                 batch_size=128, lr=0.1, lr_decay_epochs=(150, 225), lr_decay_factor=0.1,
                 momentum=0.9, weight_decay=1e-4, augment=True, max_steps=None,
                 random_state=0):
        self.arch = arch
        self.alpha = alpha
        self.m = m
        self.spec = spec
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay_epochs = lr_decay_epochs
        self.lr_decay_factor = lr_decay_factor
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augment = augment
        self.max_steps = max_steps
        self.random_state = random_state

    def _network_spec(self, n_classes) -> NetworkSpec:
        if self.spec is not None:
            if self.spec.num_classes != n_classes:
                raise ValueError(f"spec has {self.spec.num_classes} outputs but y has {n_classes} classes")
            return self.spec
        return builtin_spec(self.arch, self.alpha, self.m, n_classes)

    def fit(self, X, y):
        X = _as_images(X)
        y = np.asarray(y)
        check_classification_targets(y)
        if y.shape != (X.shape[0],):
            raise ValueError("y must hold one label per image")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.n_features_in_ = X[0].size
        self.channel_mean_, self.channel_std_ = channel_stats(X)
        self.channel_std_ = np.maximum(self.channel_std_, 1e-12)
        data = Dataset(X, y_enc, len(self.classes_), self.channel_mean_, self.channel_std_)

        seed = 0 if self.random_state is None else int(self.random_state)
        spec = self._network_spec(len(self.classes_))
        self.network_ = build_network(spec, make_rng(seed))
        decay = [e for e in self.lr_decay_epochs if e < self.epochs]
        config = TrainConfig(base_lr=self.lr, lr_decay_epochs=decay,
                             lr_decay_factor=self.lr_decay_factor, momentum=self.momentum,
                             weight_decay=self.weight_decay, epochs=self.epochs,
                             batch_size=self.batch_size, seed=seed, augment=self.augment,
                             max_steps=self.max_steps)
        self.log_ = train(self.network_, data, config)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = _as_images(X, self.n_features_in_)
        X = (X - self.channel_mean_[None, :, None, None]) / self.channel_std_[None, :, None, None]
        out = [ops.softmax(self.network_.forward(X[i:i + 256], training=False))
               for i in range(0, X.shape[0], 256)]
        return np.concatenate(out, axis=0)

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def cost_report(self):
        """Parameter / MAC report of the fitted network."""
        check_is_fitted(self, "network_")
        return count_network(self.network_.spec)
