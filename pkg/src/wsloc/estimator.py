"""Scikit-learn style estimator wrapping the training and detection pipeline.

`WeakLocalizer` follows the fit/predict contract so it composes with sklearn
tooling (`clone`, `get_params`/`set_params`, grid search over head variants).
Samples are (image, proposal boxes) pairs; the target is an image-level label
matrix, which is the only supervision the model ever sees.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import averaged_roi_scores, detections_from_scores
from .features import ConvConfig
from .geometry import Box, filter_proposals
from .model import ModelConfig
from .training import FIVE_SCALES, TrainConfig, TrainingExample, run_training


def _as_image(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"images must be (H, W) or (C, H, W), got shape {arr.shape}")
    return arr


def _as_boxes(boxes) -> list[Box]:
    if len(boxes) and isinstance(boxes[0], Box):
        return list(boxes)
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"boxes must be (K, 4) x1,y1,x2,y2 rows, got shape {arr.shape}")
    return [Box(*row) for row in arr]


def _as_label_matrix(y, n_samples: int) -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != n_samples:
        raise ValueError(f"y must be (n_samples, n_classes), got shape {arr.shape}")
    values = set(np.unique(arr))
    if values <= {0.0, 1.0}:
        arr = np.where(arr > 0, 1.0, -1.0)
    elif not values <= {-1.0, 1.0}:
        raise ValueError("labels must be in {-1,+1} (or {0,1})")
    return arr


class WeakLocalizer(BaseEstimator):
    """Context-aware two-stream localizer trained from image-level labels.

    Parameters mirror the training configuration; see fit/predict for the
    data contract. `X` is a sequence of ``(image, boxes)`` pairs where `image`
    is (H, W) or (C, H, W) in [0, 1] and `boxes` is (K, 4) proposal rows.
    """

    def __init__(
        self,
        head: str = "contrastive_s",
        grid_n: int = 6,
        context_ratio: float = 1.8,
        trunk_dim: int = 256,
        conv_channels: tuple[int, ...] = (16, 32, 64, 64),
        conv_strides: tuple[int, ...] = (2, 2, 2, 1),
        in_channels: int = 1,
        epochs: int = 30,
        lr_initial: float = 1e-5,
        lr_reduced: float = 1e-6,
        lr_drop_epoch: int = 10,
        lr_scale: float = 1.0,
        momentum: float = 0.9,
        jitter_scales: tuple[float, ...] = FIVE_SCALES,
        flip_prob: float = 0.5,
        min_proposal_side: float = 20.0,
        eval_scales: tuple[float, ...] | None = None,
        eval_flips: bool = True,
        score_min: float = 1e-4,
        nms_iou: float = 0.4,
        random_state: int = 0,
    ):
        self.head = head
        self.grid_n = grid_n
        self.context_ratio = context_ratio
        self.trunk_dim = trunk_dim
        self.conv_channels = conv_channels
        self.conv_strides = conv_strides
        self.in_channels = in_channels
        self.epochs = epochs
        self.lr_initial = lr_initial
        self.lr_reduced = lr_reduced
        self.lr_drop_epoch = lr_drop_epoch
        self.lr_scale = lr_scale
        self.momentum = momentum
        self.jitter_scales = jitter_scales
        self.flip_prob = flip_prob
        self.min_proposal_side = min_proposal_side
        self.eval_scales = eval_scales
        self.eval_flips = eval_flips
        self.score_min = score_min
        self.nms_iou = nms_iou
        self.random_state = random_state

    def _model_config(self, n_classes: int) -> ModelConfig:
        conv = ConvConfig(
            in_channels=self.in_channels,
            channels=tuple(self.conv_channels),
            strides=tuple(self.conv_strides),
        )
        return ModelConfig(
            num_classes=n_classes,
            head=self.head,
            grid_n=self.grid_n,
            context_ratio=self.context_ratio,
            trunk_dim=self.trunk_dim,
            feature_channels=conv.out_channels,
            feature_stride=conv.total_stride,
            conv=conv,
        )

    def fit(self, X, y):
        """Train on (image, boxes) pairs with +/-1 image-level labels."""
        y = _as_label_matrix(y, len(X))
        examples = [
            TrainingExample(_as_boxes(boxes), y[i], image=_as_image(image), image_id=str(i))
            for i, (image, boxes) in enumerate(X)
        ]
        cfg = TrainConfig(
            epochs=self.epochs,
            lr_initial=self.lr_initial,
            lr_reduced=self.lr_reduced,
            lr_drop_epoch=self.lr_drop_epoch,
            lr_scale=self.lr_scale,
            momentum=self.momentum,
            jitter_scales=tuple(self.jitter_scales),
            flip_prob=self.flip_prob,
            min_proposal_side=self.min_proposal_side,
            seed=self.random_state,
        )
        result = run_training(examples, self._model_config(y.shape[1]), cfg)
        self.model_ = result.model
        self.n_classes_ = y.shape[1]
        self.epoch_losses_ = result.epoch_means
        self.n_skipped_ = result.skipped
        return self

    def _scores_for(self, image, boxes) -> tuple[list[Box], np.ndarray | None]:
        kept = filter_proposals(_as_boxes(boxes), self.min_proposal_side)
        if not kept:
            return kept, None
        scales = tuple(self.eval_scales) if self.eval_scales else tuple(self.jitter_scales)
        scores = averaged_roi_scores(
            self.model_,
            kept,
            image=_as_image(image),
            scales=scales,
            use_flips=self.eval_flips,
        )
        return kept, scores

    def predict(self, X) -> list[np.ndarray]:
        """Detections per sample as (M, 6) rows: class, x1, y1, x2, y2, score."""
        check_is_fitted(self, "model_")
        out = []
        for image, boxes in X:
            kept, scores = self._scores_for(image, boxes)
            if scores is None:
                out.append(np.zeros((0, 6)))
                continue
            dets = detections_from_scores("", kept, scores, self.score_min, self.nms_iou)
            out.append(
                np.array(
                    [[d.class_id, *d.box.as_tuple(), d.score] for d in dets]
                ).reshape(-1, 6)
            )
        return out

    def decision_function(self, X) -> np.ndarray:
        """Image-level class scores (sum of averaged per-ROI final scores)."""
        check_is_fitted(self, "model_")
        rows = []
        for image, boxes in X:
            _, scores = self._scores_for(image, boxes)
            if scores is None:
                rows.append(np.zeros(self.n_classes_))
            else:
                rows.append(scores.sum(axis=0))
        return np.stack(rows)

    def score(self, X, y) -> float:
        """Mean sign agreement between image scores and +/-1 labels."""
        y = _as_label_matrix(y, len(X))
        pred = np.where(self.decision_function(X) > 0, 1.0, -1.0)
        return float((pred == y).mean())
