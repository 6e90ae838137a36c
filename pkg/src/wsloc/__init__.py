"""Weakly supervised object localization with context-aware two-stream scoring."""

from .dataio import Sample, SynthConfig, load_manifest, synth_generate
from .estimator import WeakLocalizer
from .evaluation import (
    Detection,
    average_precision,
    average_scores,
    corloc_from_top_boxes,
    mean_ap,
    nms,
    score_sweep,
)
from .features import ConvConfig, load_feature_map, save_feature_map
from .geometry import (
    Box,
    CellRect,
    FeatureGeometry,
    context_outer,
    filter_proposals,
    flip_box,
    frame_inner,
    iou,
    project_to_feature,
    rescale_box,
    scale_box,
)
from .model import (
    ModelConfig,
    TwoStreamModel,
    hinge_loss,
    image_scores,
    load_checkpoint,
    save_checkpoint,
    softmax_over_rois,
)
from .pooling import FeatureMap, PooledFeature, frame_region_pool, pool_backward, roi_pool
from .training import TrainConfig, run_training, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "Box",
    "CellRect",
    "ConvConfig",
    "Detection",
    "FeatureGeometry",
    "FeatureMap",
    "ModelConfig",
    "PooledFeature",
    "Sample",
    "SynthConfig",
    "TrainConfig",
    "TwoStreamModel",
    "WeakLocalizer",
    "average_precision",
    "average_scores",
    "context_outer",
    "corloc_from_top_boxes",
    "filter_proposals",
    "flip_box",
    "frame_inner",
    "frame_region_pool",
    "hinge_loss",
    "image_scores",
    "iou",
    "load_checkpoint",
    "load_feature_map",
    "load_manifest",
    "mean_ap",
    "nms",
    "pool_backward",
    "project_to_feature",
    "rescale_box",
    "roi_pool",
    "run_training",
    "save_checkpoint",
    "save_feature_map",
    "scale_box",
    "score_sweep",
    "sgd_step",
    "softmax_over_rois",
    "synth_generate",
    "train",
]
