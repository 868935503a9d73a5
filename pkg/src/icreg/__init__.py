"""Inverse-consistent deformable 3D image registration.

The package trains a convolutional displacement-field predictor without
supervision, constrains the two directed flows of every pair to be
inverses of each other, penalizes folding so the recovered deformations
stay topology-preserving, and ships the surrounding toolchain: volume
and flow containers with a simple binary format, a from-scratch
reverse-mode autodiff core, evaluation metrics, synthetic ground-truth
data, a command-line interface, and a scikit-learn style estimator.
"""

from .autodiff import DiffValue, ShapeError, Tape
from .estimator import InverseConsistentRegistrar, RegistrationResult
from .losses import LossReport, LossWeights, folding_breakdown, folding_count, loss_ant, loss_inv, loss_sim, loss_smo, loss_total
from .metrics import (
    landmark_error,
    multi_atlas_segment,
    overlap_metrics,
    propagate_landmarks,
    surface_distances,
    surface_voxels,
)
from .network import (
    FcnConfig,
    build_bidirectional,
    build_forward,
    init_params,
    layer_specs,
    load_checkpoint,
    predict_bidirectional,
    predict_flow,
    save_checkpoint,
)
from .sampler import estimate_inverse, map_point, trilinear_sample, warp, warp_nearest
from .synth import PairSample, make_blob_volume, make_pair, make_smooth_flow, write_dataset
from .trainer import (
    AdamState,
    CurveRow,
    NumericError,
    TrainConfig,
    TrainResult,
    adam_step,
    evaluate_pair,
    init_adam,
    refine,
    train,
)
from .volume import (
    DimensionError,
    FormatError,
    GridShape,
    LabelMap,
    TruncatedError,
    Volume,
    VolumeError,
    export_slice,
    load_labelmap,
    load_landmarks,
    load_volume,
    save_labelmap,
    save_landmarks,
    save_volume,
    zscore_normalize,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "CurveRow",
    "DiffValue",
    "DimensionError",
    "FcnConfig",
    "FormatError",
    "GridShape",
    "InverseConsistentRegistrar",
    "LabelMap",
    "LossReport",
    "LossWeights",
    "NumericError",
    "PairSample",
    "RegistrationResult",
    "ShapeError",
    "Tape",
    "TrainConfig",
    "TrainResult",
    "TruncatedError",
    "Volume",
    "VolumeError",
    "adam_step",
    "build_bidirectional",
    "build_forward",
    "estimate_inverse",
    "evaluate_pair",
    "export_slice",
    "folding_breakdown",
    "folding_count",
    "init_adam",
    "init_params",
    "landmark_error",
    "layer_specs",
    "load_checkpoint",
    "load_labelmap",
    "load_landmarks",
    "load_volume",
    "loss_ant",
    "loss_inv",
    "loss_sim",
    "loss_smo",
    "loss_total",
    "make_blob_volume",
    "make_pair",
    "make_smooth_flow",
    "map_point",
    "multi_atlas_segment",
    "overlap_metrics",
    "predict_bidirectional",
    "predict_flow",
    "propagate_landmarks",
    "refine",
    "save_checkpoint",
    "save_labelmap",
    "save_landmarks",
    "save_volume",
    "surface_distances",
    "surface_voxels",
    "train",
    "trilinear_sample",
    "warp",
    "warp_nearest",
    "write_dataset",
    "zscore_normalize",
]
