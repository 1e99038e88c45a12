"""Experiment harness: train/test grids, sweeps, and results CSV files.

Held-out-domain evaluation treats the test set as a stream processed
one image at a time for bank-based methods, mirroring deployment where
images arrive one by one and the bank only ever contains already-tested
images.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace as dc_replace
from typing import Sequence

import numpy as np

from .bank import ImageBank
from .metrics import miou
from .network import ModelParams, NetworkConfig, NormMode, forward
from .normstats import whole_set_stats
from .synthdata import DomainDataset, load_datasets
from .tensor import no_grad
from .training import TrainConfig, train_model

__all__ = [
    "ExperimentConfig",
    "EvalOutcome",
    "RESULTS_COLUMNS",
    "TEST_METHODS",
    "TRAIN_METHODS",
    "predict_stream",
    "evaluate_stream",
    "run_experiment",
    "sweep",
    "interleaved_stream",
    "result_row",
    "split_datasets",
    "write_results_csv",
    "read_results_csv",
    "summarize",
]

RESULTS_COLUMNS = (
    "method_train",
    "method_test",
    "holdout",
    "seed",
    "miou",
    "per_class_ious",
    "selection_acc",
    "wall_seconds",
)

TRAIN_METHODS = ("agg", "mldg")
TEST_METHODS = ("bn", "tn", "qib", "sib", "adabn")
SWEEPABLE = ("m", "q", "style_layer", "split")


@dataclass(frozen=True)
class ExperimentConfig:
    data_dir: str
    holdout: int
    train_methods: tuple[str, ...] = ("agg", "mldg")
    test_methods: tuple[str, ...] = ("bn", "tn", "sib")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = 3
    batch_size: int = 8
    inner_lr: float = 1e-3
    outer_lr: float = 5e-3
    alpha: float = 1.0
    split: tuple[int, int] = (2, 2)
    m: int = 4
    q: int = 128
    style_layer: int = 1
    widths: tuple[int, ...] = (8, 16, 16)
    num_classes: int = 4

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("need at least one seed")
        for t in self.train_methods:
            if t not in TRAIN_METHODS:
                raise ValueError(f"unknown train method {t!r}")
        for t in self.test_methods:
            if t not in TEST_METHODS:
                raise ValueError(f"unknown test method {t!r}")

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            inner_lr=self.inner_lr,
            outer_lr=self.outer_lr,
            alpha=self.alpha,
            batch_size=self.batch_size,
            epochs=self.epochs,
            split=self.split,
            seed=seed,
        )

    def net_config(self) -> NetworkConfig:
        return NetworkConfig(
            widths=self.widths, num_classes=self.num_classes, style_layer_index=self.style_layer
        )


@dataclass
class EvalOutcome:
    miou: float
    per_class: np.ndarray
    selection_acc: float | None
    wall_seconds: float


def _with_style_layer(params: ModelParams, style_layer: int | None) -> ModelParams:
    if style_layer is None or style_layer == params.config.style_layer_index:
        return params
    return ModelParams(params.config.with_style_layer(style_layer), params.tensors, params.running)


def _argmax_preds(logits_data: np.ndarray) -> list[np.ndarray]:
    return [np.argmax(logits_data[i], axis=0).astype(np.int64) for i in range(logits_data.shape[0])]


def predict_stream(
    params: ModelParams,
    images: np.ndarray,
    method: str,
    m: int = 4,
    q: int = 128,
    style_layer: int | None = None,
    domain_tags: Sequence[int] | None = None,
    bank: ImageBank | None = None,
) -> tuple[list[np.ndarray], float | None]:
    """Predict every image of a test stream under one statistics policy.

    bn uses running moments per image; tn groups the stream into
    consecutive batches of size m normalized by their own moments;
    sib/qib run the image bank one image at a time; adabn first
    aggregates whole-set moments, then scores each image against them.
    Returns (predictions, selection accuracy); the accuracy is only
    defined for bank methods on streams carrying at least two distinct
    domain tags, and is None otherwise.
    """
    if method not in TEST_METHODS:
        raise ValueError(f"unknown test method {method!r}")
    params = _with_style_layer(params, style_layer)
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty test stream")
    preds: list[np.ndarray] = []
    selection_acc: float | None = None

    if method == "bn":
        with no_grad():
            for i in range(n):
                logits, _, _ = forward(params, images[i : i + 1], NormMode.SOURCE_RUNNING)
                preds.extend(_argmax_preds(logits.data))
    elif method == "tn":
        group = max(1, m)
        with no_grad():
            for start in range(0, n, group):
                batch = images[start : start + group]
                logits, _, _ = forward(params, batch, NormMode.TARGET_SPECIFIC)
                preds.extend(_argmax_preds(logits.data))
    elif method in ("sib", "qib"):
        if bank is None:
            bank = ImageBank(q, policy=method)
        matched = total = 0
        for i in range(n):
            tag = None if domain_tags is None else int(domain_tags[i])
            pred, selected = bank.predict_with_bank(images[i : i + 1], params, m, domain_tag=tag)
            preds.append(pred)
            if tag is not None:
                matched += sum(1 for e in selected if e.domain_tag == tag)
                total += len(selected)
        if domain_tags is not None and len(set(int(t) for t in domain_tags)) > 1 and total > 0:
            selection_acc = matched / total
    else:  # adabn
        stats = whole_set_stats([images[i : i + 1] for i in range(n)], params)
        with no_grad():
            for i in range(n):
                logits, _, _ = forward(
                    params, images[i : i + 1], NormMode.EXTERNAL_STATS, external_stats=stats
                )
                preds.extend(_argmax_preds(logits.data))
    return preds, selection_acc


def evaluate_stream(
    params: ModelParams,
    images: np.ndarray,
    masks: np.ndarray,
    method: str,
    m: int = 4,
    q: int = 128,
    style_layer: int | None = None,
    domain_tags: Sequence[int] | None = None,
    num_classes: int | None = None,
) -> EvalOutcome:
    """predict_stream plus scoring and wall-clock accounting."""
    k = num_classes if num_classes is not None else params.config.num_classes
    t0 = time.perf_counter()
    preds, selection_acc = predict_stream(
        params, images, method, m=m, q=q, style_layer=style_layer, domain_tags=domain_tags
    )
    wall = time.perf_counter() - t0
    per_class, mean = miou(preds, list(masks), k)
    return EvalOutcome(mean, per_class, selection_acc, wall)


def split_datasets(datasets: list[DomainDataset], holdout: int):
    ids = [d.domain_id for d in datasets]
    if holdout not in ids:
        raise ValueError(f"holdout domain {holdout} not in dataset (has {ids})")
    sources = [d for d in datasets if d.domain_id != holdout]
    target = next(d for d in datasets if d.domain_id == holdout)
    if not sources:
        raise ValueError("holdout excludes every domain; nothing to train on")
    return sources, target


def run_experiment(config: ExperimentConfig, cache: dict | None = None) -> list[dict]:
    """Train/test grid over seeds; one results row per cell.

    ``cache`` maps (train_method, seed, split) to trained params so
    sweeps over test-only parameters can reuse checkpoints.
    """
    datasets = load_datasets(config.data_dir)
    sources, target = split_datasets(datasets, config.holdout)
    cache = {} if cache is None else cache
    rows: list[dict] = []
    for train_method in config.train_methods:
        for seed in config.seeds:
            key = (train_method, seed, config.split, config.epochs)
            if key not in cache:
                cache[key] = train_model(
                    sources, config.train_config(seed), train_method, net_config=config.net_config()
                )
            params = cache[key]
            for test_method in config.test_methods:
                outcome = evaluate_stream(
                    params,
                    target.images,
                    target.masks,
                    test_method,
                    m=config.m,
                    q=config.q,
                    style_layer=config.style_layer,
                    num_classes=config.num_classes,
                )
                rows.append(result_row(train_method, test_method, config.holdout, seed, outcome))
    return rows


def result_row(train_method, test_method, holdout, seed, outcome: EvalOutcome) -> dict:
    per_class = ";".join(
        "nan" if np.isnan(v) else repr(float(v)) for v in outcome.per_class
    )
    return {
        "method_train": train_method,
        "method_test": test_method,
        "holdout": holdout,
        "seed": seed,
        "miou": repr(float(outcome.miou)),
        "per_class_ious": per_class,
        "selection_acc": "" if outcome.selection_acc is None else repr(float(outcome.selection_acc)),
        "wall_seconds": repr(float(outcome.wall_seconds)),
    }


def sweep(parameter: str, values: Sequence, config: ExperimentConfig) -> list[tuple[object, list[dict]]]:
    """One grid run per parameter value; shared seeds and checkpoints.

    Test-only parameters (m, q, style_layer) reuse each seed's trained
    model across values; split retrains since it changes training.
    """
    if parameter not in SWEEPABLE:
        raise ValueError(f"cannot sweep {parameter!r}; choose from {SWEEPABLE}")
    bank_methods = {"sib", "qib"} & set(config.test_methods)
    if parameter in ("q", "style_layer") and not bank_methods:
        raise ValueError(f"sweeping {parameter} requires a bank test method (sib/qib)")
    if parameter == "m" and not ({"sib", "qib", "tn"} & set(config.test_methods)):
        raise ValueError("sweeping m requires a batch-statistics test method (tn/sib/qib)")
    if parameter == "split" and "mldg" not in config.train_methods:
        raise ValueError("sweeping split requires episodic training")

    cache: dict = {}
    out = []
    for value in values:
        if parameter == "split" and isinstance(value, str):
            a, b = value.split(":")
            value = (int(a), int(b))
        cfg = dc_replace(config, **{parameter: value})
        out.append((value, run_experiment(cfg, cache)))
    return out


def interleaved_stream(
    datasets: Sequence[DomainDataset], domain_ids: Sequence[int], per_domain: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Round-robin mix of several domains into one test stream.

    Returns (images, masks, domain tags) with images alternating
    d0, d1, ..., d0, d1, ... so bank selection must tell domains apart.
    """
    by_id = {d.domain_id: d for d in datasets}
    images, masks, tags = [], [], []
    for j in range(per_domain):
        for did in domain_ids:
            ds = by_id[did]
            if j >= len(ds):
                raise ValueError(f"domain {did} has only {len(ds)} images, need {per_domain}")
            images.append(ds.images[j : j + 1])
            masks.append(ds.masks[j])
            tags.append(did)
    return np.concatenate(images), np.stack(masks), np.asarray(tags)


def write_results_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RESULTS_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def summarize(rows: list[dict]) -> dict[tuple[str, str], tuple[float, float]]:
    """Mean and population std of mIoU per (train, test) cell."""
    cells: dict[tuple[str, str], list[float]] = {}
    for row in rows:
        cells.setdefault((row["method_train"], row["method_test"]), []).append(float(row["miou"]))
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in cells.items()}
