"""A small fully convolutional segmentation network.

Stride-1 conv + norm + relu blocks followed by a 1x1 classifier, so
logits keep the input's spatial size at any resolution. Every norm
layer is fed by one of four statistic sources chosen per forward pass;
the layer math itself lives in normstats.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace as dc_replace
from enum import Enum
from typing import Mapping

import numpy as np

from . import normstats
from .normstats import BatchStats, NormLayerState, StyleSignature, batch_moments
from .ops import conv2d
from .tensor import Tensor, no_grad, relu

__all__ = [
    "NetworkConfig",
    "NormMode",
    "ModelParams",
    "init_params",
    "forward",
    "extract_query_style",
    "prenorm_features",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"MSEG0001"


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (8, 16, 16)
    kernel_size: int = 3
    num_classes: int = 4
    norm_eps: float = 1e-5
    style_layer_index: int = 1  # 1-based norm-layer index the style is read from

    def __post_init__(self):
        if not self.widths:
            raise ValueError("widths must be nonempty")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if not 1 <= self.style_layer_index <= len(self.widths):
            raise ValueError(
                f"style_layer_index must be in [1, {len(self.widths)}], got {self.style_layer_index}"
            )
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def with_style_layer(self, index: int) -> "NetworkConfig":
        return dc_replace(self, style_layer_index=index)


class NormMode(Enum):
    TRAIN_BATCH = "train_batch"  # current-batch moments, the training path
    SOURCE_RUNNING = "source_running"  # accumulated running moments
    TARGET_SPECIFIC = "target_specific"  # the test batch's own moments
    EXTERNAL_STATS = "external_stats"  # caller-supplied per-layer moments


@dataclass
class _RunningMoments:
    mean: np.ndarray
    var: np.ndarray

    def copy(self) -> "_RunningMoments":
        return _RunningMoments(self.mean.copy(), self.var.copy())


@dataclass
class ModelParams:
    """Named parameter tensors plus per-layer running moments.

    Parameters split into the feature extractor (conv kernels/biases and
    norm affines) and the classifier (the final 1x1 conv); the two are
    updated as separate groups during episodic training.
    """

    config: NetworkConfig
    tensors: dict[str, Tensor]
    running: list[_RunningMoments] = field(default_factory=list)

    def theta(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("classifier.")}

    def phi(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith("classifier.")}

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def norm_state(self, i: int) -> NormLayerState:
        return NormLayerState(
            weight=self.tensors[f"norm{i}.weight"],
            bias=self.tensors[f"norm{i}.bias"],
            running_mean=self.running[i].mean,
            running_var=self.running[i].var,
            eps=self.config.norm_eps,
        )

    def replace(self, new: Mapping[str, Tensor]) -> "ModelParams":
        """Functional update: new tensors for the given names, shared running moments."""
        unknown = set(new) - set(self.tensors)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        return ModelParams(self.config, {**self.tensors, **dict(new)}, self.running)

    def clone(self) -> "ModelParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()}
        return ModelParams(self.config, tensors, [r.copy() for r in self.running])

    def astype(self, dtype) -> "ModelParams":
        tensors = {
            k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.tensors.items()
        }
        return ModelParams(self.config, tensors, [r.copy() for r in self.running])


def _param_order(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Fixed serialization order of all arrays in a checkpoint."""
    order: list[tuple[str, tuple[int, ...]]] = []
    c_in = config.in_channels
    k = config.kernel_size
    for i, width in enumerate(config.widths):
        order.append((f"conv{i}.kernel", (width, c_in, k, k)))
        order.append((f"conv{i}.bias", (width,)))
        order.append((f"norm{i}.weight", (width,)))
        order.append((f"norm{i}.bias", (width,)))
        order.append((f"running{i}.mean", (width,)))
        order.append((f"running{i}.var", (width,)))
        c_in = width
    order.append(("classifier.kernel", (config.num_classes, c_in, 1, 1)))
    order.append(("classifier.bias", (config.num_classes,)))
    return order


def init_params(config: NetworkConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fan-in-scaled Gaussian kernels, identity norm affines, unit running variance."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    running: list[_RunningMoments] = []
    c_in = config.in_channels
    k = config.kernel_size
    for i, width in enumerate(config.widths):
        fan_in = c_in * k * k
        kern = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(width, c_in, k, k))
        tensors[f"conv{i}.kernel"] = Tensor(kern.astype(dtype), requires_grad=True)
        tensors[f"conv{i}.bias"] = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        tensors[f"norm{i}.weight"] = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        tensors[f"norm{i}.bias"] = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        running.append(
            _RunningMoments(np.zeros(width, dtype=np.float64), np.ones(width, dtype=np.float64))
        )
        c_in = width
    kern = rng.normal(0.0, 1.0 / np.sqrt(c_in), size=(config.num_classes, c_in, 1, 1))
    tensors["classifier.kernel"] = Tensor(kern.astype(dtype), requires_grad=True)
    tensors["classifier.bias"] = Tensor(np.zeros(config.num_classes, dtype=dtype), requires_grad=True)
    return ModelParams(config, tensors, running)


def _as_input(params: ModelParams, batch) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=params.dtype))
    if x.ndim != 4:
        raise ValueError(f"batch must be rank 4, got shape {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("empty batch")
    if x.shape[1] != params.config.in_channels:
        raise ValueError(
            f"batch has {x.shape[1]} channels, network expects {params.config.in_channels}"
        )
    return x


def forward(
    params: ModelParams,
    batch,
    mode: NormMode,
    update_running: bool = False,
    external_stats: list[BatchStats] | None = None,
    momentum: float = 0.1,
) -> tuple[Tensor, StyleSignature, list[BatchStats]]:
    """Full forward pass.

    Returns (logits, style signature, per-layer pre-norm batch moments).
    Running moments change only when ``update_running`` is set and the
    mode is TRAIN_BATCH; every other combination leaves params untouched.
    """
    config = params.config
    x = _as_input(params, batch)
    n_layers = len(config.widths)
    if mode is NormMode.EXTERNAL_STATS:
        if external_stats is None or len(external_stats) != n_layers:
            raise ValueError(f"external stats must supply all {n_layers} layers")

    h = x
    style: StyleSignature | None = None
    layer_stats: list[BatchStats] = []
    for i in range(n_layers):
        pre = conv2d(h, params.tensors[f"conv{i}.kernel"], params.tensors[f"conv{i}.bias"])
        stats = normstats.compute_batch_stats(pre.data)
        layer_stats.append(stats)
        if i + 1 == config.style_layer_index:
            style = normstats.extract_style(stats, config.norm_eps)
        state = params.norm_state(i)
        if mode in (NormMode.TRAIN_BATCH, NormMode.TARGET_SPECIFIC):
            mean_t, var_t = batch_moments(pre)
            normed = normstats.apply_norm(pre, mean_t, var_t, state)
            if update_running and mode is NormMode.TRAIN_BATCH:
                normstats.update_running(state, stats, momentum)
        elif mode is NormMode.SOURCE_RUNNING:
            normed = normstats.apply_norm(pre, state.running_mean, state.running_var, state)
        else:
            ext = external_stats[i]
            normed = normstats.apply_norm(pre, ext.mean, ext.var, state)
        h = relu(normed)
    logits = conv2d(h, params.tensors["classifier.kernel"], params.tensors["classifier.bias"])
    assert style is not None
    return logits, style, layer_stats


def extract_query_style(params: ModelParams, image) -> StyleSignature:
    """Style signature of a batch via a partial forward to the style layer.

    Layers before the style layer (if any) are normalized with the
    batch's own moments, matching how the image will be processed at
    test time.
    """
    config = params.config
    with no_grad():
        h = _as_input(params, image)
        for i in range(config.style_layer_index):
            pre = conv2d(h, params.tensors[f"conv{i}.kernel"], params.tensors[f"conv{i}.bias"])
            stats = normstats.compute_batch_stats(pre.data)
            if i + 1 == config.style_layer_index:
                return normstats.extract_style(stats, config.norm_eps)
            mean_t, var_t = batch_moments(pre)
            h = relu(normstats.apply_norm(pre, mean_t, var_t, params.norm_state(i)))
    raise AssertionError("unreachable")


def prenorm_features(
    params: ModelParams, batch, layer: int, prefix_stats: list[BatchStats]
) -> np.ndarray:
    """Pre-norm conv output of ``layer`` (0-based), with earlier layers
    normalized by the supplied per-layer moments."""
    if len(prefix_stats) < layer:
        raise ValueError(f"need moments for {layer} earlier layers, got {len(prefix_stats)}")
    with no_grad():
        h = _as_input(params, batch)
        for i in range(layer + 1):
            pre = conv2d(h, params.tensors[f"conv{i}.kernel"], params.tensors[f"conv{i}.bias"])
            if i == layer:
                return pre.data
            ext = prefix_stats[i]
            h = relu(normstats.apply_norm(pre, ext.mean, ext.var, params.norm_state(i)))
    raise AssertionError("unreachable")


# --- checkpoint serialization ---


def save_checkpoint(path, params: ModelParams) -> None:
    """Write magic, config header, then every array as little-endian float32."""
    config = params.config
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", config.in_channels))
        f.write(struct.pack("<I", len(config.widths)))
        f.write(struct.pack(f"<{len(config.widths)}I", *config.widths))
        f.write(struct.pack("<I", config.kernel_size))
        f.write(struct.pack("<I", config.num_classes))
        f.write(struct.pack("<d", config.norm_eps))
        f.write(struct.pack("<I", config.style_layer_index))
        for name, shape in _param_order(config):
            arr = _checkpoint_array(params, name)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _checkpoint_array(params: ModelParams, name: str) -> np.ndarray:
    if name.startswith("running"):
        idx, kind = name.split(".")
        i = int(idx.removeprefix("running"))
        return getattr(params.running[i], kind)
    return params.tensors[name].data


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (in_channels,) = struct.unpack("<I", f.read(4))
        (n_layers,) = struct.unpack("<I", f.read(4))
        widths = struct.unpack(f"<{n_layers}I", f.read(4 * n_layers))
        (kernel_size,) = struct.unpack("<I", f.read(4))
        (num_classes,) = struct.unpack("<I", f.read(4))
        (norm_eps,) = struct.unpack("<d", f.read(8))
        (style_layer_index,) = struct.unpack("<I", f.read(4))
        config = NetworkConfig(
            in_channels=in_channels,
            widths=widths,
            kernel_size=kernel_size,
            num_classes=num_classes,
            norm_eps=norm_eps,
            style_layer_index=style_layer_index,
        )
        tensors: dict[str, Tensor] = {}
        running = [
            _RunningMoments(np.zeros(w, dtype=np.float64), np.ones(w, dtype=np.float64))
            for w in widths
        ]
        for name, shape in _param_order(config):
            n = int(np.prod(shape))
            arr = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            if name.startswith("running"):
                idx, kind = name.split(".")
                i = int(idx.removeprefix("running"))
                setattr(running[i], kind, arr.astype(np.float64))
            else:
                tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True)
        trailing = f.read(1)
        if trailing:
            raise ValueError("trailing bytes after checkpoint payload")
    return ModelParams(config, tensors, running)
