"""Scikit-learn-flavored estimator facade over training and inference.

For callers who want fit/predict/score over arrays rather than the
dataset/stream machinery. Images are (n, 3, H, W) float arrays, masks
(n, H, W) integer arrays, and the per-sample ``domains`` vector groups
samples into source domains for episodic training.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .experiments import TEST_METHODS, predict_stream
from .metrics import miou
from .network import NetworkConfig
from .synthdata import DomainDataset
from .training import TrainConfig, train_model
from .validation import check_domain_labels, check_image_array, check_mask_array

__all__ = ["SegmentationEstimator"]


def _parse_split(split) -> tuple[int, int]:
    if isinstance(split, str):
        a, b = split.split(":")
        return int(a), int(b)
    a, b = split
    return int(a), int(b)


class SegmentationEstimator(BaseEstimator):
    """Segmentation with episodic training and test-time statistics.

    method: "mldg" (episodic, needs >= 2 training domains) or "agg"
    (pooled baseline). test_method picks the statistics policy used by
    predict: "bn", "tn", "sib", "qib", or "adabn". Bank methods build a
    fresh bank per predict call and process X as an ordered stream.
    """

    def __init__(
        self,
        method: str = "mldg",
        test_method: str = "sib",
        epochs: int = 3,
        batch_size: int = 8,
        inner_lr: float = 1e-3,
        outer_lr: float = 5e-3,
        alpha: float = 1.0,
        split: str = "2:2",
        m: int = 4,
        q: int = 128,
        style_layer: int = 1,
        widths: tuple = (8, 16, 16),
        seed: int = 0,
    ):
        self.method = method
        self.test_method = test_method
        self.epochs = epochs
        self.batch_size = batch_size
        self.inner_lr = inner_lr
        self.outer_lr = outer_lr
        self.alpha = alpha
        self.split = split
        self.m = m
        self.q = q
        self.style_layer = style_layer
        self.widths = widths
        self.seed = seed

    def fit(self, X, y, domains=None):
        if self.method not in ("agg", "mldg"):
            raise ValueError(f"method must be 'agg' or 'mldg', got {self.method!r}")
        if self.test_method not in TEST_METHODS:
            raise ValueError(f"test_method must be one of {TEST_METHODS}")
        X = check_image_array(X)
        y = check_mask_array(y, X)
        domains = check_domain_labels(domains, X.shape[0])

        scored = y[y != 255]
        if scored.size == 0:
            raise ValueError("every pixel is ignored; nothing to fit")
        self.num_classes_ = int(scored.max()) + 1
        unique = np.unique(domains)
        self.domains_ = unique
        datasets = []
        for new_id, d in enumerate(unique):
            sel = domains == d
            datasets.append(
                DomainDataset(new_id, f"domain_{int(d)}", X[sel], y[sel].astype(np.uint8))
            )

        n_tr, m_te = _parse_split(self.split)
        d = len(datasets)
        # rebalance when the configured split does not cover the domain count
        if self.method == "mldg" and d > 2 and n_tr + m_te != d:
            n_tr, m_te = max(1, d // 2), d - max(1, d // 2)
        config = TrainConfig(
            inner_lr=self.inner_lr,
            outer_lr=self.outer_lr,
            alpha=self.alpha,
            batch_size=self.batch_size,
            epochs=self.epochs,
            split=(n_tr, m_te),
            seed=self.seed,
        )
        net_config = NetworkConfig(
            in_channels=X.shape[1],
            widths=tuple(self.widths),
            num_classes=self.num_classes_,
            style_layer_index=self.style_layer,
        )
        self.model_params_ = train_model(datasets, config, self.method, net_config=net_config)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_params_"):
            raise NotFittedError("call fit before predict/score")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_image_array(X, channels=self.model_params_.config.in_channels)
        preds, _ = predict_stream(
            self.model_params_, X, self.test_method, m=self.m, q=self.q
        )
        return np.stack(preds)

    def score(self, X, y) -> float:
        """Mean IoU of predict(X) against y."""
        self._check_fitted()
        X = check_image_array(X, channels=self.model_params_.config.in_channels)
        y = check_mask_array(y, X, num_classes=self.num_classes_)
        preds = self.predict(X)
        _, mean = miou(list(preds), list(y), self.num_classes_)
        return mean
