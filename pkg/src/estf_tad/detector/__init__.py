"""Temporal pyramid, anchor-free head, targets, losses and training."""

from .loss import LossBreakdown, detection_loss, diou_loss_1d, flatten_outputs, focal_loss
from .model import (
    Detector,
    DetectorConfig,
    HeadParams,
    LevelOutput,
    PyramidFeatures,
    bin_centres,
    build_pyramid,
    clip_segments,
    decode_level,
    head_forward,
    init_detector,
    init_head,
    spatial_pool,
)
from .targets import LevelGeometry, Targets, assign_targets, pyramid_geometry, stack_targets
from .train import (
    AdamW,
    EpochRecord,
    InferenceConfig,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    clip_grad_norm,
    decays,
    detections_for_video,
    lr_at,
    predict,
    predict_prepared,
    prepare_split,
    train,
)

__all__ = [
    "AdamW",
    "Detector",
    "DetectorConfig",
    "EpochRecord",
    "HeadParams",
    "InferenceConfig",
    "LevelGeometry",
    "LevelOutput",
    "LossBreakdown",
    "PyramidFeatures",
    "Targets",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "assign_targets",
    "bin_centres",
    "build_pyramid",
    "clip_grad_norm",
    "clip_segments",
    "decays",
    "decode_level",
    "detections_for_video",
    "detection_loss",
    "diou_loss_1d",
    "flatten_outputs",
    "focal_loss",
    "head_forward",
    "init_detector",
    "init_head",
    "lr_at",
    "predict",
    "predict_prepared",
    "prepare_split",
    "pyramid_geometry",
    "spatial_pool",
    "stack_targets",
    "train",
]
