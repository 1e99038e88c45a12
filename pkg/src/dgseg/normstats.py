"""Normalization statistics and style signatures.

Covers the four ways a norm layer can be fed (current-batch moments,
accumulated running moments, statistics of the test batch itself, or
externally supplied per-layer moments), the running-average update, the
per-channel style signature of a feature map, and the symmetric KL
distance between two signatures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, astype, broadcast_to, constant, div, mul, reshape, sqrt, sub, tmean

__all__ = [
    "BatchStats",
    "NormLayerState",
    "StyleSignature",
    "batch_moments",
    "compute_batch_stats",
    "apply_norm",
    "update_running",
    "extract_style",
    "style_of_features",
    "symmetric_kl",
    "combine_moments",
    "whole_set_stats",
]


@dataclass
class BatchStats:
    """Per-channel population mean and variance over a batch.

    ``count`` is the number of positions (N*H*W) the moments were taken
    over; it is what makes streaming combination possible.
    """

    mean: np.ndarray
    var: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape:
            raise ValueError("mean/var length mismatch")


@dataclass
class NormLayerState:
    """One norm layer: affine parameters plus accumulated running moments.

    ``weight`` and ``bias`` are autodiff tensors (they are trained);
    the running moments are plain arrays updated outside the graph.
    """

    weight: Tensor
    bias: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be nonnegative")


@dataclass
class StyleSignature:
    """Per-channel (mean, std) of a designated layer's pre-norm features."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu/sigma length mismatch")
        if np.any(self.sigma <= 0):
            raise ValueError("style sigma must be positive")

    @property
    def channels(self) -> int:
        return self.mu.size


def batch_moments(x: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable per-channel population mean/variance of (N,C,H,W).

    Accumulated in float64 (returned as float64 tensors): normalization
    divides the mean's rounding error by sigma, so float32 moments would
    not survive a 1e-6 elementwise contract on the normalized output.
    """
    if x.ndim != 4:
        raise ValueError(f"expected rank-4 features, got shape {x.shape}")
    x64 = astype(x, np.float64)
    c = x.shape[1]
    mean = tmean(x64, axis=(0, 2, 3))
    centered = sub(x64, broadcast_to(reshape(mean, (1, c, 1, 1)), x64.shape))
    var = tmean(mul(centered, centered), axis=(0, 2, 3))
    return mean, var


def compute_batch_stats(features) -> BatchStats:
    """Per-channel population moments, accumulated in float64."""
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    if data.ndim != 4:
        raise ValueError(f"expected rank-4 features, got shape {data.shape}")
    if data.shape[0] < 1:
        raise ValueError("empty batch")
    d64 = data.astype(np.float64)
    mean = d64.mean(axis=(0, 2, 3))
    var = ((d64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    n, _, h, w = data.shape
    return BatchStats(mean=mean, var=var, count=n * h * w)


def apply_norm(features: Tensor, mean, var, state: NormLayerState) -> Tensor:
    """Normalize with the given moments, then apply the layer's affine.

    ``mean``/``var`` may be tensors (gradients flow through them) or
    plain arrays (treated as constants). Raises on negative variance.

    Internally float64, rounded back to the feature dtype once at the
    end: the per-channel shift scales moment rounding by 1/sigma, which
    float32 intermediates cannot absorb.
    """
    c = features.shape[1]
    if not isinstance(mean, Tensor):
        mean = constant(np.asarray(mean), dtype=np.float64)
    if not isinstance(var, Tensor):
        var = constant(np.asarray(var), dtype=np.float64)
    if mean.size != c or var.size != c:
        raise ValueError(f"moment length {mean.size}/{var.size} does not match {c} channels")
    if np.any(var.data < 0):
        raise ValueError("negative variance")

    x = astype(features, np.float64)

    def chan(v: Tensor) -> Tensor:
        return broadcast_to(reshape(astype(v, np.float64), (1, c, 1, 1)), x.shape)

    denom = sqrt(astype(var, np.float64) + float(state.eps))
    normed = div(sub(x, chan(mean)), chan(denom))
    out = normed * chan(state.weight) + chan(state.bias)
    return astype(out, features.dtype)


def update_running(state: NormLayerState, batch: BatchStats, momentum: float = 0.1) -> NormLayerState:
    """Blend batch moments into the running moments, in place."""
    if not 0.0 < momentum <= 1.0:
        raise ValueError(f"momentum must be in (0, 1], got {momentum}")
    state.running_mean[:] = (1.0 - momentum) * state.running_mean + momentum * batch.mean
    state.running_var[:] = (1.0 - momentum) * state.running_var + momentum * batch.var
    return state


def extract_style(stats: BatchStats, eps: float) -> StyleSignature:
    """Style signature from pre-norm moments; std is eps-stabilized."""
    sigma = np.sqrt(np.maximum(stats.var, 0.0) + eps)
    return StyleSignature(mu=stats.mean.copy(), sigma=sigma)


def style_of_features(features, eps: float) -> StyleSignature:
    return extract_style(compute_batch_stats(features), eps)


def symmetric_kl(a: StyleSignature, b: StyleSignature) -> float:
    """Symmetric KL divergence between per-channel Gaussian signatures.

    Each direction is log(s_j/s_i) + (s_i^2 + (m_i - m_j)^2) / (2 s_j^2)
    - 1/2, summed over channels.
    """
    if a.channels != b.channels:
        raise ValueError(f"channel mismatch: {a.channels} vs {b.channels}")
    va, vb = a.sigma**2, b.sigma**2
    gap = (a.mu - b.mu) ** 2
    kl_ab = np.log(b.sigma / a.sigma) + (va + gap) / (2.0 * vb) - 0.5
    kl_ba = np.log(a.sigma / b.sigma) + (vb + gap) / (2.0 * va) - 0.5
    return float(np.sum(kl_ab + kl_ba))


def combine_moments(
    n_a: int, mean_a: np.ndarray, var_a: np.ndarray, n_b: int, mean_b: np.ndarray, var_b: np.ndarray
) -> tuple[int, np.ndarray, np.ndarray]:
    """Merge two (count, mean, population variance) summaries."""
    if n_a == 0:
        return n_b, mean_b.copy(), var_b.copy()
    n = n_a + n_b
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / n)
    m2 = n_a * var_a + n_b * var_b + delta**2 * (n_a * n_b / n)
    return n, mean, m2 / n


def whole_set_stats(dataset: Sequence, params, chunk_size: int = 8) -> list[BatchStats]:
    """Per-layer moments over an entire image set.

    Equivalent to forwarding the whole set as one batch with batch-self
    normalization and reading off each layer's pre-norm moments, but
    computed layer by layer over fixed-size chunks so memory stays flat.
    Earlier layers are normalized with the already-aggregated moments.
    """
    from .network import prenorm_features

    images = [im.data if isinstance(im, Tensor) else np.asarray(im) for im in dataset]
    if not images:
        raise ValueError("empty dataset")
    n_layers = len(params.config.widths)
    stats: list[BatchStats] = []
    for layer in range(n_layers):
        count, mean, var = 0, None, None
        for start in range(0, len(images), chunk_size):
            chunk = np.concatenate(images[start : start + chunk_size], axis=0)
            feats = prenorm_features(params, chunk, layer, stats)
            s = compute_batch_stats(feats)
            if mean is None:
                count, mean, var = s.count, s.mean, s.var
            else:
                count, mean, var = combine_moments(count, mean, var, s.count, s.mean, s.var)
        stats.append(BatchStats(mean=mean, var=var, count=count))
    return stats
