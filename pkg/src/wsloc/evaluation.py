"""Test-time score averaging, NMS, detection AP / mAP, and CorLoc.

AP follows the area-under-the-precision-envelope convention by default; the
eleven-point variant is available by flag. CorLoc takes the single top-scoring
box per positive image (raw averaged scores, no score floor, no NMS) and
counts hits at IoU strictly greater than the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, flip_box, iou, rescale_box
from .model import TwoStreamModel
from .pooling import FeatureMap

AP_MODES = ("continuous", "eleven_point")


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: Box
    score: float


def average_scores(score_matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of per-setting (K, C) final score matrices."""
    if not score_matrices:
        raise ValueError("need at least one score matrix")
    first = score_matrices[0]
    for m in score_matrices[1:]:
        if m.shape != first.shape:
            raise ValueError("score matrices must share one shape")
    return np.mean(score_matrices, axis=0)


def nms(dets: Sequence[Detection], iou_thr: float = 0.4) -> list[Detection]:
    """Greedy suppression for one image+class; score ties keep the lower index."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        if all(iou(dets[i].box, k.box) <= iou_thr for k in kept):
            kept.append(dets[i])
    return kept


def _match_detections(
    dets: Sequence[Detection],
    gts: dict[str, list[Box]],
    iou_thr: float,
) -> tuple[np.ndarray, int]:
    """Score-ordered TP flags; each GT box may be matched at most once."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    unmatched = {image_id: list(range(len(boxes))) for image_id, boxes in gts.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        det = dets[i]
        candidates = unmatched.get(det.image_id, [])
        best, best_iou = None, 0.0
        for gi in candidates:
            v = iou(det.box, gts[det.image_id][gi])
            if v > best_iou:
                best, best_iou = gi, v
        if best is not None and best_iou > iou_thr:
            tp[rank] = True
            candidates.remove(best)
    n_gt = sum(len(boxes) for boxes in gts.values())
    return tp, n_gt


def average_precision(
    dets: Sequence[Detection],
    gts: dict[str, list[Box]],
    iou_thr: float = 0.5,
    mode: str = "continuous",
) -> float | None:
    """AP for one class; None when the class has no ground truth."""
    if mode not in AP_MODES:
        raise ValueError(f"unknown AP mode {mode!r}")
    tp, n_gt = _match_detections(dets, gts, iou_thr)
    if n_gt == 0:
        return None
    if len(dets) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)

    if mode == "eleven_point":
        points = []
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t - 1e-12
            points.append(float(precision[mask].max()) if mask.any() else 0.0)
        return float(np.mean(points))

    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev_recall) * envelope))


def mean_ap(aps: Sequence[float | None]) -> float:
    """Mean over classes whose AP is defined."""
    defined = [a for a in aps if a is not None]
    if not defined:
        raise ValueError("no class has a defined AP")
    return float(np.mean(defined))


def corloc_from_top_boxes(
    top_boxes: dict[str, Box],
    gt_boxes: dict[str, list[Box]],
    iou_thr: float = 0.5,
) -> float | None:
    """Percentage of positive images whose top box overlaps some GT (IoU > thr)."""
    if not top_boxes:
        return None
    hits = 0
    for image_id, box in top_boxes.items():
        if any(iou(box, g) > iou_thr for g in gt_boxes.get(image_id, [])):
            hits += 1
    return 100.0 * hits / len(top_boxes)


# ---------------------------------------------------------------------------
# Test-time augmentation driver
# ---------------------------------------------------------------------------


def eval_settings(
    scales: Sequence[float], use_flips: bool
) -> list[tuple[float, bool]]:
    flips = (False, True) if use_flips else (False,)
    return [(s, f) for s in scales for f in flips]


def averaged_roi_scores(
    model: TwoStreamModel,
    boxes: list[Box],
    image: np.ndarray | None = None,
    fmap: FeatureMap | None = None,
    scales: Sequence[float] = (1.0,),
    use_flips: bool = False,
) -> np.ndarray:
    """Mean of the final per-ROI score matrices over all scales and flips.

    Scores stay indexed by the original ROI; only the forward pass sees the
    transformed geometry. Precomputed feature maps get a single plain pass.
    """
    if image is None:
        fp = model.forward(boxes, fmap=fmap)
        return fp.final_scores
    from .dataio import resize_image

    _, h, w = image.shape
    mats = []
    for s, flip in eval_settings(scales, use_flips):
        out_h = max(1, int(round(h * s)))
        out_w = max(1, int(round(w * s)))
        jit = resize_image(image, out_h, out_w)
        jboxes = [rescale_box(b, out_w / w, out_h / h) for b in boxes]
        if flip:
            jit = jit[:, :, ::-1]
            jboxes = [flip_box(b, out_w) for b in jboxes]
        mats.append(model.forward(jboxes, image=jit).final_scores)
    return average_scores(mats)


def detections_from_scores(
    image_id: str,
    boxes: list[Box],
    scores: np.ndarray,
    score_min: float = 1e-4,
    nms_iou: float = 0.4,
) -> list[Detection]:
    """Filter by minimum score and apply per-class NMS."""
    kept: list[Detection] = []
    for c in range(scores.shape[1]):
        dets = [
            Detection(image_id, c, boxes[k], float(scores[k, c]))
            for k in range(len(boxes))
            if scores[k, c] >= score_min
        ]
        kept.extend(nms(dets, nms_iou))
    return kept


def top_box_per_class(boxes: list[Box], scores: np.ndarray) -> list[tuple[int, Box, float]]:
    """Argmax ROI per class from raw averaged scores (ties: lowest index)."""
    out = []
    for c in range(scores.shape[1]):
        k = int(np.argmax(scores[:, c]))
        out.append((c, boxes[k], float(scores[k, c])))
    return out


def score_sweep(
    model: TwoStreamModel,
    image: np.ndarray | None,
    center: tuple[float, float],
    class_id: int,
    sizes: Sequence[float],
    fmap: FeatureMap | None = None,
) -> list[tuple[float, float, float, float]]:
    """Branch scores for boxes of several sizes centered on one pixel.

    Returns (size, branch_roi, branch_context, localization score) rows for
    plotting how each branch reacts as a box grows over an object.
    """
    cx, cy = center
    if fmap is None:
        if image is None:
            raise ValueError("pass an image or a feature map")
        fmap, _ = model.extract_features(image)
    rows = []
    for size in sizes:
        half = size / 2.0
        box = Box(cx - half, cy - half, cx + half, cy + half)
        fp = model.forward([box], fmap=fmap)
        rows.append(
            (
                float(size),
                float(fp.loc.branch_roi[0, class_id]),
                float(fp.loc.branch_context[0, class_id]),
                float(fp.loc.scores[0, class_id]),
            )
        )
    return rows
