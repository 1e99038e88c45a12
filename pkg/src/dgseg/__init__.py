"""Domain-generalizable semantic segmentation at desk scale.

Episodic meta-training over multiple source domains, plus test-time
adaptation of normalization statistics: per-batch statistics, whole-set
statistics, and a style-selected FIFO image bank.
"""

from .bank import BankEntry, ImageBank
from .estimators import SegmentationEstimator
from .experiments import (
    EvalOutcome,
    ExperimentConfig,
    evaluate_stream,
    interleaved_stream,
    predict_stream,
    run_experiment,
    summarize,
    sweep,
)
from .metrics import ConfusionMatrix, miou
from .network import (
    ModelParams,
    NetworkConfig,
    NormMode,
    extract_query_style,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .normstats import (
    BatchStats,
    NormLayerState,
    StyleSignature,
    apply_norm,
    compute_batch_stats,
    symmetric_kl,
    update_running,
    whole_set_stats,
)
from .ops import conv2d, finite_difference_gradient, pixel_cross_entropy
from .synthdata import (
    DEFAULT_STYLES,
    DomainDataset,
    DomainStyle,
    SceneSpec,
    apply_style,
    build_benchmark,
    generate_scene,
    load_datasets,
    save_datasets,
)
from .tensor import (
    DifferentiableGraph,
    GradientMap,
    MissingParameterError,
    NumericError,
    Tensor,
    backward,
    no_grad,
    relu,
)
from .training import (
    EpisodeBatch,
    TrainConfig,
    agg_step,
    domain_specific_loss,
    inner_update,
    meta_step,
    poly_lr,
    sample_episode,
    train_model,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "DifferentiableGraph",
    "GradientMap",
    "NumericError",
    "MissingParameterError",
    "backward",
    "no_grad",
    "relu",
    "conv2d",
    "pixel_cross_entropy",
    "finite_difference_gradient",
    "NetworkConfig",
    "NormMode",
    "ModelParams",
    "init_params",
    "forward",
    "extract_query_style",
    "save_checkpoint",
    "load_checkpoint",
    "BatchStats",
    "NormLayerState",
    "StyleSignature",
    "compute_batch_stats",
    "apply_norm",
    "update_running",
    "symmetric_kl",
    "whole_set_stats",
    "BankEntry",
    "ImageBank",
    "TrainConfig",
    "EpisodeBatch",
    "sample_episode",
    "domain_specific_loss",
    "inner_update",
    "meta_step",
    "agg_step",
    "poly_lr",
    "train_model",
    "SceneSpec",
    "DomainStyle",
    "DomainDataset",
    "DEFAULT_STYLES",
    "generate_scene",
    "apply_style",
    "build_benchmark",
    "save_datasets",
    "load_datasets",
    "ConfusionMatrix",
    "miou",
    "ExperimentConfig",
    "EvalOutcome",
    "predict_stream",
    "evaluate_stream",
    "run_experiment",
    "sweep",
    "interleaved_stream",
    "summarize",
    "SegmentationEstimator",
]
