"""SGD-with-momentum optimization loop: batch size 1, scale/flip jittering,
per-epoch learning-rate schedule, deterministic under a fixed seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import Sample, load_labels, load_proposals, read_image, resize_image
from .features import load_feature_map
from .geometry import Box, filter_proposals, flip_box, rescale_box
from .model import ModelConfig, TwoStreamModel, save_checkpoint
from .pooling import FeatureMap

log = logging.getLogger(__name__)

FIVE_SCALES = (0.7, 0.85, 1.0, 1.2, 1.44)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr_initial: float = 1e-5
    lr_reduced: float = 1e-6
    lr_drop_epoch: int = 10  # last epoch that still uses lr_initial
    lr_scale: float = 1.0
    momentum: float = 0.9
    dampening: float = 0.0
    jitter_scales: tuple[float, ...] = FIVE_SCALES
    jitter_sizes: tuple[tuple[int, int], ...] | None = None  # absolute (W, H) targets
    flip_prob: float = 0.5
    min_proposal_side: float = 20.0
    seed: int = 0
    checkpoint_every: int = 0  # epochs between mid-run checkpoints; 0 = final only

    def lr_for_epoch(self, epoch: int) -> float:
        base = self.lr_initial if epoch <= self.lr_drop_epoch else self.lr_reduced
        return base * self.lr_scale


@dataclass
class TrainingExample:
    boxes: list[Box]
    labels: np.ndarray
    image: np.ndarray | None = None
    fmap: FeatureMap | None = None
    image_id: str = ""


@dataclass
class TrainResult:
    model: TwoStreamModel
    losses: list[tuple[int, int, float]]  # (epoch, step, loss)
    epoch_means: list[float]
    skipped: int
    checkpoint_path: Path | None = None
    loss_log_path: Path | None = None


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    dampening: float = 0.0,
) -> None:
    """In-place momentum update: v <- m*v + (1-d)*g; p <- p - lr*v."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        v = velocity[name]
        v *= momentum
        v += (1.0 - dampening) * g
        p -= lr * v


def sample_jitter(
    rng: np.random.Generator, cfg: TrainConfig, image_hw: tuple[int, int]
) -> tuple[tuple[float, float], bool]:
    """Draw a (sy, sx) scale pair and a flip flag for one training step."""
    if cfg.jitter_sizes:
        tw, th = cfg.jitter_sizes[int(rng.integers(len(cfg.jitter_sizes)))]
        h, w = image_hw
        scale = (th / h, tw / w)
    else:
        if not cfg.jitter_scales:
            raise ValueError("jitter scale list must not be empty")
        s = cfg.jitter_scales[int(rng.integers(len(cfg.jitter_scales)))]
        scale = (s, s)
    return scale, bool(rng.random() < cfg.flip_prob)


def apply_jitter(
    image: np.ndarray, boxes: list[Box], scale: tuple[float, float], flip: bool
) -> tuple[np.ndarray, list[Box]]:
    """Resize and optionally mirror an image together with its boxes."""
    sy, sx = scale
    _, h, w = image.shape
    out_h = max(1, int(round(h * sy)))
    out_w = max(1, int(round(w * sx)))
    ay, ax = out_h / h, out_w / w  # the realized factors after rounding
    out = resize_image(image, out_h, out_w)
    boxes = [rescale_box(b, ax, ay) for b in boxes]
    if flip:
        out = out[:, :, ::-1]
        boxes = [flip_box(b, out_w) for b in boxes]
    return out, boxes


def load_training_examples(
    samples: Sequence[Sample], num_classes: int, feature_stride: int = 8
) -> list[TrainingExample]:
    """Eagerly load images/labels/proposals; ground-truth files are never read."""
    examples = []
    for s in samples:
        boxes = load_proposals(s.proposals_path)
        labels = load_labels(s.labels_path, num_classes)
        if str(s.image_path).endswith(".cltf"):
            fmap = load_feature_map(s.image_path, stride=feature_stride)
            examples.append(TrainingExample(boxes, labels, fmap=fmap, image_id=s.image_id))
        else:
            image = read_image(s.image_path)
            examples.append(TrainingExample(boxes, labels, image=image, image_id=s.image_id))
    return examples


def run_training(
    examples: Sequence[TrainingExample],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    on_epoch_end: Callable[[TwoStreamModel, int], None] | None = None,
) -> TrainResult:
    """Run the optimization loop in memory; see `train` for the on-disk wrapper.

    Raster examples get scale/flip jittering each step; precomputed feature
    maps cannot be re-rendered, so they are used as-is.
    """
    rng = np.random.default_rng(cfg.seed)
    model = TwoStreamModel(model_cfg, rng=rng)
    velocity = {name: np.zeros_like(p) for name, p in model.params.items()}

    usable = [
        (ex, filter_proposals(ex.boxes, cfg.min_proposal_side)) for ex in examples
    ]
    skipped_ids = [ex.image_id for ex, kept in usable if not kept]
    for image_id in skipped_ids:
        log.warning("skipping %s: no proposal survives the size filter", image_id or "<image>")
    usable = [(ex, kept) for ex, kept in usable if kept]
    if not usable:
        raise ValueError("no training image has a surviving proposal")

    losses: list[tuple[int, int, float]] = []
    epoch_means: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_for_epoch(epoch)
        order = rng.permutation(len(usable))
        epoch_losses = []
        for step, idx in enumerate(order, 1):
            ex, boxes = usable[idx]
            if ex.image is not None:
                scale, flip = sample_jitter(rng, cfg, ex.image.shape[1:])
                image, jboxes = apply_jitter(ex.image, boxes, scale, flip)
                loss, grads, _ = model.loss_and_grads(jboxes, ex.labels, image=image)
            else:
                loss, grads, _ = model.loss_and_grads(boxes, ex.labels, fmap=ex.fmap)
            sgd_step(model.params, grads, velocity, lr, cfg.momentum, cfg.dampening)
            losses.append((epoch, step, loss))
            epoch_losses.append(loss)
        epoch_means.append(float(np.mean(epoch_losses)))
        if on_epoch_end is not None:
            on_epoch_end(model, epoch)
    return TrainResult(model, losses, epoch_means, skipped=len(skipped_ids))


def train(
    samples: Sequence[Sample],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir,
) -> TrainResult:
    """Train from manifest samples, writing checkpoints and the loss log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    examples = load_training_examples(
        samples, model_cfg.num_classes, model_cfg.feature_stride
    )

    def on_epoch_end(model: TwoStreamModel, epoch: int) -> None:
        if cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_ep{epoch:03d}.cltf", model)

    result = run_training(examples, model_cfg, cfg, on_epoch_end=on_epoch_end)

    result.checkpoint_path = out / "checkpoint.cltf"
    save_checkpoint(result.checkpoint_path, result.model)
    result.loss_log_path = out / "loss_log.csv"
    with open(result.loss_log_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,step,loss\n")
        for epoch, step, loss in result.losses:
            fh.write(f"{epoch},{step},{loss:.17g}\n")
    return result
