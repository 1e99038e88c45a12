"""Episodic meta-training and the pooled-data baseline.

Each meta step samples a task from the source domains, splits it into
meta-train and meta-test halves that share no domain, takes a simulated
SGD step on the meta-train loss, evaluates the stepped parameters on
the meta-test half, and updates the real parameters with the gradient
of the combined objective. In exact mode that gradient is
differentiated through the simulated step (a second-order term); in
first-order mode the simulated step's gradient is treated as constant.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .network import ModelParams, NetworkConfig, NormMode, forward, init_params
from .ops import pixel_cross_entropy
from .tensor import NumericError, Tensor, backward, mul, sub

__all__ = [
    "TrainConfig",
    "EpisodeBatch",
    "sample_episode",
    "domain_specific_loss",
    "inner_update",
    "meta_step",
    "agg_step",
    "poly_lr",
    "train_model",
    "TRAIN_LOG_COLUMNS",
]

TRAIN_LOG_COLUMNS = ("step", "epoch", "lr", "L_ds", "L_dg", "L_meta", "wall_seconds")

META_GRADIENT_MODES = ("exact", "first_order")
LOSS_ORDERS = ("ds_first", "dg_first")


@dataclass(frozen=True)
class TrainConfig:
    inner_lr: float = 1e-3
    outer_lr: float = 5e-3
    alpha: float = 1.0
    batch_size: int = 8
    epochs: int = 3
    split: tuple[int, int] = (2, 2)  # meta-train : meta-test domain counts
    poly_power: float = 0.9
    meta_gradient: str = "exact"
    loss_order: str = "ds_first"  # which loss the weight alpha multiplies onto
    seed: int = 0
    momentum: float = 0.1  # running-moment blend factor
    flip: bool = True  # horizontal-flip augmentation

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive (inner may be 0)")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be at least 1")
        n, m = self.split
        if n < 1 or m < 1:
            raise ValueError(f"both split sides must be >= 1, got {self.split}")
        if self.meta_gradient not in META_GRADIENT_MODES:
            raise ValueError(f"meta_gradient must be one of {META_GRADIENT_MODES}")
        if self.loss_order not in LOSS_ORDERS:
            raise ValueError(f"loss_order must be one of {LOSS_ORDERS}")


@dataclass
class EpisodeBatch:
    """One sampled task: whole domains on each side, never shared."""

    train_domains: tuple[int, ...]
    test_domains: tuple[int, ...]
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    def __post_init__(self):
        if set(self.train_domains) & set(self.test_domains):
            raise ValueError("meta-train and meta-test domains overlap")
        if not self.train_domains or not self.test_domains:
            raise ValueError("both split sides need at least one domain")


def _maybe_flip(images: np.ndarray, labels: np.ndarray, rng, enabled: bool):
    if not enabled:
        return images, labels
    images, labels = images.copy(), labels.copy()
    flips = rng.random(images.shape[0]) < 0.5
    images[flips] = images[flips][..., ::-1]
    labels[flips] = labels[flips][..., ::-1]
    return images, labels


def _draw(dataset, k: int, rng) -> np.ndarray:
    idx = rng.choice(len(dataset), size=k, replace=len(dataset) < k)
    return np.sort(idx)


def sample_episode(domains: Sequence, config: TrainConfig, rng: np.random.Generator) -> EpisodeBatch:
    """Draw a task and split its domains into meta-train / meta-test.

    Every domain contributes the same number of samples. Two source
    domains force a 1:1 split, the only possible one.
    """
    d = len(domains)
    if d < 2:
        raise ValueError(f"episodic training needs at least 2 source domains, got {d}")
    n, m = (1, 1) if d == 2 else config.split
    if n + m != d:
        raise ValueError(f"split {n}:{m} does not cover {d} source domains")
    per_domain = max(1, config.batch_size // d)
    perm = rng.permutation(d)
    train_ids = tuple(int(i) for i in perm[:n])
    test_ids = tuple(int(i) for i in perm[n:])

    def gather(ids):
        images, labels = [], []
        for i in ids:
            ds = domains[i]
            idx = _draw(ds, per_domain, rng)
            images.append(ds.images[idx])
            labels.append(ds.masks[idx].astype(np.int64))
        return np.concatenate(images), np.concatenate(labels)

    tr_x, tr_y = _maybe_flip(*gather(train_ids), rng, config.flip)
    te_x, te_y = _maybe_flip(*gather(test_ids), rng, config.flip)
    return EpisodeBatch(train_ids, test_ids, tr_x, tr_y, te_x, te_y)


def domain_specific_loss(params: ModelParams, images, labels) -> Tensor:
    """Cross-entropy under current-batch normalization, no side effects."""
    logits, _, _ = forward(params, images, NormMode.TRAIN_BATCH)
    return pixel_cross_entropy(logits, labels)


def inner_update(params: ModelParams, grads: Mapping[str, Tensor], lr: float) -> ModelParams:
    """One simulated SGD step, recorded so gradients can flow through it."""
    stepped = {name: sub(params.tensors[name], mul(g, float(lr))) for name, g in grads.items()}
    return params.replace(stepped)


def meta_step(
    params: ModelParams, episode: EpisodeBatch, config: TrainConfig, lr: float | None = None
) -> tuple[ModelParams, dict]:
    """One outer update from one episode.

    Returns the updated parameters and {L_ds, L_dg, L_meta} diagnostics.
    Running moments blend in the meta-train forward, once per step.
    """
    lr = config.outer_lr if lr is None else lr
    wrt = params.tensors
    try:
        logits, _, _ = forward(
            params,
            episode.train_images,
            NormMode.TRAIN_BATCH,
            update_running=True,
            momentum=config.momentum,
        )
        loss_ds = pixel_cross_entropy(logits, episode.train_labels)

        exact = config.meta_gradient == "exact"
        inner_grads = backward(loss_ds, wrt, create_graph=exact)
        if not exact:
            inner_grads = {k: g.detach() for k, g in inner_grads.items()}
        stepped = inner_update(params, inner_grads, config.inner_lr)

        logits_dg, _, _ = forward(stepped, episode.test_images, NormMode.TRAIN_BATCH)
        loss_dg = pixel_cross_entropy(logits_dg, episode.test_labels)
    except NumericError as e:
        raise NumericError(f"meta step diverged: {e}") from e

    if config.loss_order == "ds_first":
        loss_meta = loss_ds + mul(loss_dg, config.alpha)
    else:
        loss_meta = loss_dg + mul(loss_ds, config.alpha)
    diagnostics = {
        "L_ds": float(loss_ds.data),
        "L_dg": float(loss_dg.data),
        "L_meta": float(loss_meta.data),
    }
    if not np.isfinite(diagnostics["L_meta"]):
        raise NumericError(f"non-finite meta loss: {diagnostics}")

    meta_grads = backward(loss_meta, wrt)
    new_tensors = {
        name: Tensor(p.data - lr * meta_grads[name].data, requires_grad=True)
        for name, p in params.tensors.items()
    }
    return params.replace(new_tensors), diagnostics


def agg_step(
    params: ModelParams, images, labels, lr: float, momentum: float = 0.1
) -> tuple[ModelParams, float]:
    """One SGD step on the pooled-batch cross-entropy."""
    logits, _, _ = forward(
        params, images, NormMode.TRAIN_BATCH, update_running=True, momentum=momentum
    )
    loss = pixel_cross_entropy(logits, labels)
    grads = backward(loss, params.tensors)
    new_tensors = {
        name: Tensor(p.data - lr * grads[name].data, requires_grad=True)
        for name, p in params.tensors.items()
    }
    return params.replace(new_tensors), float(loss.data)


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    """base * (1 - step/total) ** power, clamped to 0 past the end."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if total < 1:
        raise ValueError("total must be positive")
    if step > total:
        return 0.0
    return base * (1.0 - step / total) ** power


def _sample_pooled(domains: Sequence, config: TrainConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    sizes = [len(d) for d in domains]
    flat = rng.choice(sum(sizes), size=config.batch_size, replace=sum(sizes) < config.batch_size)
    images, labels = [], []
    bounds = np.cumsum([0] + sizes)
    for f in np.sort(flat):
        d = int(np.searchsorted(bounds, f, side="right") - 1)
        j = int(f - bounds[d])
        images.append(domains[d].images[j : j + 1])
        labels.append(domains[d].masks[j : j + 1].astype(np.int64))
    return _maybe_flip(np.concatenate(images), np.concatenate(labels), rng, config.flip)


def train_model(
    domains: Sequence,
    config: TrainConfig,
    method: str = "mldg",
    net_config: NetworkConfig | None = None,
    log_path=None,
) -> ModelParams:
    """Full training run; returns final parameters, optionally logging CSV."""
    if method not in ("agg", "mldg"):
        raise ValueError(f"method must be 'agg' or 'mldg', got {method!r}")
    if method == "mldg" and len(domains) < 2:
        raise ValueError("episodic training needs at least 2 source domains")
    if not domains:
        raise ValueError("no training domains")
    net_config = net_config or NetworkConfig()
    params = init_params(net_config, config.seed)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1517)))
    steps_per_epoch = max(1, sum(len(d) for d in domains) // config.batch_size)
    total = config.epochs * steps_per_epoch

    rows = []
    t0 = time.perf_counter()
    for step in range(total):
        lr = poly_lr(config.outer_lr, step, total, config.poly_power)
        if method == "mldg":
            episode = sample_episode(domains, config, rng)
            params, diag = meta_step(params, episode, config, lr)
            l_ds, l_dg, l_meta = diag["L_ds"], diag["L_dg"], diag["L_meta"]
        else:
            images, labels = _sample_pooled(domains, config, rng)
            params, loss = agg_step(params, images, labels, lr, config.momentum)
            l_ds, l_dg, l_meta = loss, None, loss
        rows.append(
            (
                step,
                step // steps_per_epoch,
                repr(lr),
                repr(l_ds),
                "" if l_dg is None else repr(l_dg),
                repr(l_meta),
                repr(time.perf_counter() - t0),
            )
        )
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(TRAIN_LOG_COLUMNS)
            writer.writerows(rows)
    return params
