"""Scikit-learn estimator facade over the network builder and trainer.

``MergeRunClassifier`` exposes the usual fit/predict/predict_proba/score
surface and plain ``get_params``/``set_params`` round-tripping, so the
networks compose with sklearn pipelines, grid search, and cloning.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import data as datamod
from .netbuilder import NetworkSpec, build_network, parse_kind
from .tensor import Tensor
from .train import TrainConfig, train_loop

IMAGE_PIXELS = 3 * 32 * 32


def validate_images(X, dtype=np.float32):
    """Coerce input to a [N,C,H,W] float array.

    Accepts 4-d image arrays directly, or 2-d arrays of 3072 columns which
    are reshaped to 3x32x32.
    """
    X = np.asarray(X)
    if X.ndim == 2:
        if X.shape[1] != IMAGE_PIXELS:
            raise ValueError(
                f"2-d input must have {IMAGE_PIXELS} columns (3x32x32 images), got {X.shape[1]}"
            )
        X = X.reshape(X.shape[0], 3, 32, 32)
    if X.ndim != 4:
        raise ValueError(f"expected [N,C,H,W] images or [N,{IMAGE_PIXELS}] rows, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    return np.ascontiguousarray(X, dtype=dtype)


def validate_labels(y, n_samples):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"labels must be a length-{n_samples} vector, got shape {y.shape}")
    classes = np.unique(y)
    if classes.shape[0] < 2:
        raise ValueError("need at least two classes")
    encoded = np.searchsorted(classes, y).astype(np.int64)
    return classes, encoded


class MergeRunClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier built on merge-and-run (or residual) networks.

    Parameters mirror the network and training configuration: ``kind`` is
    one of resnet / dilnet / dmrnet / identity, ``L`` the depth parameter
    (divisible by 6), ``widths`` the three stage widths. Training follows
    Nesterov SGD with the step-drop schedule.
    """

    def __init__(
        self,
        kind="dmrnet",
        L=6,
        B=2,
        widths=(16, 32, 64),
        width_multiplier=1,
        epochs=10,
        batch_size=64,
        lr=0.1,
        momentum=0.9,
        weight_decay=1e-4,
        augment=False,
        dtype="float32",
        seed=0,
    ):
        self.kind = kind
        self.L = L
        self.B = B
        self.widths = widths
        self.width_multiplier = width_multiplier
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augment = augment
        self.dtype = dtype
        self.seed = seed

    def _np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def fit(self, X, y):
        X = validate_images(X, self._np_dtype())
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.classes_, encoded = validate_labels(y, X.shape[0])

        spec = NetworkSpec(
            kind=parse_kind(self.kind),
            L=self.L,
            B=self.B,
            stage_widths=tuple(self.widths),
            width_multiplier=self.width_multiplier,
            num_classes=len(self.classes_),
            in_channels=X.shape[1],
        )
        self.model_ = build_network(spec, seed=self.seed, dtype=self._np_dtype())

        means, stds = datamod.compute_channel_stats(X)
        stds = np.where(stds > 0, stds, 1.0).astype(X.dtype)
        self.channel_means_ = means
        self.channel_stds_ = stds
        train_set = datamod.LabeledImageSet(X, encoded, means, stds)

        config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.seed,
            dtype=self.dtype,
            augment=self.augment,
        )
        self.metrics_ = train_loop(self.model_, train_set, None, config)
        return self

    def _forward_batched(self, X, batch_size=256):
        X = validate_images(X, self._np_dtype())
        X = datamod.normalize(X, self.channel_means_, self.channel_stds_)
        chunks = []
        for start in range(0, X.shape[0], batch_size):
            logits = self.model_.forward(Tensor(X[start : start + batch_size]), training=False)
            chunks.append(logits.data)
        return np.concatenate(chunks)

    def decision_function(self, X):
        self._check_fitted()
        return self._forward_batched(X)

    def predict_proba(self, X):
        logits = self.decision_function(X)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this MergeRunClassifier instance is not fitted yet")
