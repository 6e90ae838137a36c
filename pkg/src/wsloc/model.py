"""Two-stream scoring network: shared trunk, classification and localization
streams, per-class softmax over ROIs, multiplicative fusion, and hinge loss.

Everything is plain numpy with hand-written exact backward passes. The four
localization head variants are:

* ``baseline``       L = FC(F_roi)
* ``additive``       L = FC_roi(F_roi) + FC_ctx(F_context), independent layers
* ``contrastive_a``  L = FC(F_roi) - FC(F_context), one shared layer
* ``contrastive_s``  L = FC(F_frame) - FC(F_context), one shared layer

For the contrastive heads the shared layer is a single parameter pair used in
both places, so the bias cancels in L identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .features import ConvConfig, conv_backward, conv_forward
from .geometry import Box, context_outer, frame_inner, project_to_feature
from .pooling import FeatureMap, PooledBatch, pool_batch_backward, pool_regions

HEAD_VARIANTS = ("baseline", "additive", "contrastive_a", "contrastive_s")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    head: str = "contrastive_s"
    grid_n: int = 6
    context_ratio: float = 1.8
    trunk_dim: int = 256
    feature_channels: int = 64
    feature_stride: int = 8
    conv: ConvConfig | None = field(default_factory=ConvConfig)

    def __post_init__(self) -> None:
        if self.head not in HEAD_VARIANTS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEAD_VARIANTS}")
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if self.conv is not None:
            if self.conv.out_channels != self.feature_channels:
                raise ValueError("feature_channels must match the conv stack output")
            if self.conv.total_stride != self.feature_stride:
                raise ValueError("feature_stride must match the conv stack stride")

    @property
    def pooled_dim(self) -> int:
        return self.grid_n * self.grid_n * self.feature_channels

    @property
    def uses_context(self) -> bool:
        return self.head in ("additive", "contrastive_a", "contrastive_s")

    @property
    def uses_frame(self) -> bool:
        return self.head == "contrastive_s"


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    # Biases get the same small uniform range: a ring with no cells pools to an
    # all-zero vector, and zero biases would pin its ReLUs exactly at the kink.
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return _xavier(rng, fan_in, fan_out), rng.uniform(-a, a, size=fan_out)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameter dict in a fixed key order (seedable)."""
    params: dict[str, np.ndarray] = {}
    if cfg.conv is not None:
        from .features import init_conv_params

        for i, (w, b) in enumerate(init_conv_params(cfg.conv, rng)):
            params[f"conv{i}.weight"] = w
            params[f"conv{i}.bias"] = b
    d_in, d_t, c = cfg.pooled_dim, cfg.trunk_dim, cfg.num_classes
    params["trunk1.weight"], params["trunk1.bias"] = _dense(rng, d_in, d_t)
    params["trunk2.weight"], params["trunk2.bias"] = _dense(rng, d_t, d_t)
    params["cls.weight"], params["cls.bias"] = _dense(rng, d_t, c)
    if cfg.head == "additive":
        params["loc_roi.weight"], params["loc_roi.bias"] = _dense(rng, d_t, c)
        params["loc_ctx.weight"], params["loc_ctx.bias"] = _dense(rng, d_t, c)
    else:
        params["loc.weight"], params["loc.bias"] = _dense(rng, d_t, c)
    return params


# ---------------------------------------------------------------------------
# Stream building blocks (pure functions, exact backward)
# ---------------------------------------------------------------------------


def trunk_forward(
    pooled: np.ndarray,
    w1: np.ndarray,
    b1: np.ndarray,
    w2: np.ndarray,
    b2: np.ndarray,
) -> tuple[np.ndarray, dict]:
    """Two linear+ReLU layers applied to rows of flattened pooled features."""
    x = np.atleast_2d(pooled)
    if x.shape[1] != w1.shape[0]:
        raise ValueError(f"trunk expects {w1.shape[0]}-dim rows, got {x.shape[1]}")
    pre1 = x @ w1 + b1
    z1 = np.maximum(pre1, 0.0)
    pre2 = z1 @ w2 + b2
    out = np.maximum(pre2, 0.0)
    cache = {"x": x, "m1": pre1 > 0.0, "z1": z1, "m2": pre2 > 0.0}
    return out, cache


def trunk_backward(
    d_out: np.ndarray, cache: dict, w1: np.ndarray, w2: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    d2 = d_out * cache["m2"]
    d_z1 = (d2 @ w2.T) * cache["m1"]
    grads = {
        "trunk2.weight": cache["z1"].T @ d2,
        "trunk2.bias": d2.sum(axis=0),
        "trunk1.weight": cache["x"].T @ d_z1,
        "trunk1.bias": d_z1.sum(axis=0),
    }
    return d_z1 @ w1.T, grads


def classification_scores(f_roi: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Linear class scores per ROI, no nonlinearity."""
    return np.atleast_2d(f_roi) @ w + b


@dataclass
class LocalizationOutput:
    scores: np.ndarray  # L, (K, C)
    branch_roi: np.ndarray  # (K, C)
    branch_context: np.ndarray  # (K, C); zero for the baseline head


def head_baseline(f_roi: np.ndarray, w: np.ndarray, b: np.ndarray) -> LocalizationOutput:
    g = np.atleast_2d(f_roi) @ w + b
    return LocalizationOutput(g, g, np.zeros_like(g))


def head_additive(
    f_roi: np.ndarray,
    f_ctx: np.ndarray,
    w_roi: np.ndarray,
    b_roi: np.ndarray,
    w_ctx: np.ndarray,
    b_ctx: np.ndarray,
) -> LocalizationOutput:
    g_roi = np.atleast_2d(f_roi) @ w_roi + b_roi
    g_ctx = np.atleast_2d(f_ctx) @ w_ctx + b_ctx
    return LocalizationOutput(g_roi + g_ctx, g_roi, g_ctx)


def _head_contrastive(
    f_primary: np.ndarray, f_ctx: np.ndarray, w: np.ndarray, b: np.ndarray
) -> LocalizationOutput:
    g_primary = np.atleast_2d(f_primary) @ w + b
    g_ctx = np.atleast_2d(f_ctx) @ w + b
    return LocalizationOutput(g_primary - g_ctx, g_primary, g_ctx)


def head_contrastive_a(
    f_roi: np.ndarray, f_ctx: np.ndarray, w: np.ndarray, b: np.ndarray
) -> LocalizationOutput:
    return _head_contrastive(f_roi, f_ctx, w, b)


def head_contrastive_s(
    f_frame: np.ndarray, f_ctx: np.ndarray, w: np.ndarray, b: np.ndarray
) -> LocalizationOutput:
    return _head_contrastive(f_frame, f_ctx, w, b)


def softmax_over_rois(scores: np.ndarray) -> np.ndarray:
    """Column-wise softmax: normalizes each class's scores across ROIs."""
    scores = np.atleast_2d(scores)
    shifted = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_over_rois_backward(d_sigma: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    return sigma * (d_sigma - (d_sigma * sigma).sum(axis=0, keepdims=True))


def image_scores(s: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Per-class image scores: sum over ROIs of S * sigma."""
    if s.shape != sigma.shape:
        raise ValueError("score matrices must have identical shapes")
    return (s * sigma).sum(axis=0)


def hinge_loss(f: np.ndarray, y: np.ndarray) -> float:
    """Multi-label hinge, averaged over classes; y entries must be +/-1."""
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if f.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    if not np.all(np.abs(y) == 1.0):
        raise ValueError("labels must be +1 or -1")
    return float(np.maximum(0.0, 1.0 - y * f).mean())


def hinge_loss_grad(f: np.ndarray, y: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    active = (1.0 - y * f) > 0.0
    return np.where(active, -y / f.shape[0], 0.0)


# ---------------------------------------------------------------------------
# Composed network
# ---------------------------------------------------------------------------


@dataclass
class ForwardPass:
    boxes: list[Box]
    fmap: FeatureMap
    conv_cache: list | None
    pooled: dict[str, PooledBatch]  # kind -> pooled grids for all ROIs
    trunk_cache: dict
    feats: dict[str, np.ndarray]  # kind -> (K, trunk_dim)
    kinds: tuple[str, ...]
    cls_scores: np.ndarray  # S, (K, C)
    loc: LocalizationOutput
    sigma: np.ndarray  # softmax of L over ROIs, (K, C)
    final_scores: np.ndarray  # S * sigma, (K, C)
    image_scores: np.ndarray  # (C,)


class TwoStreamModel:
    """Differentiable detector trained from image-level labels only."""

    def __init__(
        self,
        cfg: ModelConfig,
        params: dict[str, np.ndarray] | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.cfg = cfg
        if params is None:
            params = init_params(cfg, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    def _conv_params(self) -> list[tuple[np.ndarray, np.ndarray]]:
        assert self.cfg.conv is not None
        return [
            (self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"])
            for i in range(len(self.cfg.conv.channels))
        ]

    def extract_features(self, image: np.ndarray) -> tuple[FeatureMap, list]:
        if self.cfg.conv is None:
            raise ValueError("model was configured for precomputed feature maps")
        return conv_forward(image, self._conv_params(), self.cfg.conv)

    def forward(
        self,
        boxes: list[Box],
        image: np.ndarray | None = None,
        fmap: FeatureMap | None = None,
    ) -> ForwardPass:
        if (image is None) == (fmap is None):
            raise ValueError("pass exactly one of image= or fmap=")
        if len(boxes) == 0:
            raise ValueError("forward requires at least one ROI")
        conv_cache = None
        if image is not None:
            fmap, conv_cache = self.extract_features(image)
        assert fmap is not None

        cfg = self.cfg
        n = cfg.grid_n
        geom = fmap.geometry
        k = len(boxes)
        roi_rects = [project_to_feature(box, geom) for box in boxes]
        pooled: dict[str, PooledBatch] = {
            "roi": pool_regions(fmap, roi_rects, [None] * k, n, "roi")
        }
        if cfg.uses_context:
            outers = [
                project_to_feature(context_outer(box, cfg.context_ratio), geom)
                for box in boxes
            ]
            pooled["context"] = pool_regions(fmap, outers, roi_rects, n, "context")
        if cfg.uses_frame:
            inners = [
                project_to_feature(frame_inner(box, cfg.context_ratio), geom)
                for box in boxes
            ]
            pooled["frame"] = pool_regions(fmap, roi_rects, inners, n, "frame")

        kinds = tuple(pooled.keys())
        stacked = np.concatenate([pooled[kind].values.reshape(k, -1) for kind in kinds])
        trunk_out, trunk_cache = trunk_forward(
            stacked,
            self.params["trunk1.weight"],
            self.params["trunk1.bias"],
            self.params["trunk2.weight"],
            self.params["trunk2.bias"],
        )
        feats = {kind: trunk_out[i * k : (i + 1) * k] for i, kind in enumerate(kinds)}

        s = classification_scores(feats["roi"], self.params["cls.weight"], self.params["cls.bias"])
        loc = self._loc_head(feats)
        sigma = softmax_over_rois(loc.scores)
        final = s * sigma
        return ForwardPass(
            boxes=list(boxes),
            fmap=fmap,
            conv_cache=conv_cache,
            pooled=pooled,
            trunk_cache=trunk_cache,
            feats=feats,
            kinds=kinds,
            cls_scores=s,
            loc=loc,
            sigma=sigma,
            final_scores=final,
            image_scores=final.sum(axis=0),
        )

    def _loc_head(self, feats: dict[str, np.ndarray]) -> LocalizationOutput:
        p = self.params
        head = self.cfg.head
        if head == "baseline":
            return head_baseline(feats["roi"], p["loc.weight"], p["loc.bias"])
        if head == "additive":
            return head_additive(
                feats["roi"],
                feats["context"],
                p["loc_roi.weight"],
                p["loc_roi.bias"],
                p["loc_ctx.weight"],
                p["loc_ctx.bias"],
            )
        if head == "contrastive_a":
            return head_contrastive_a(
                feats["roi"], feats["context"], p["loc.weight"], p["loc.bias"]
            )
        return head_contrastive_s(
            feats["frame"], feats["context"], p["loc.weight"], p["loc.bias"]
        )

    def backward(self, fp: ForwardPass, d_image_scores: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar whose d/d(image scores) is given; exact."""
        p = self.params
        k = len(fp.boxes)
        d_final = np.broadcast_to(
            np.asarray(d_image_scores, dtype=np.float64), fp.final_scores.shape
        )
        d_s = d_final * fp.sigma
        d_sigma = d_final * fp.cls_scores
        d_l = softmax_over_rois_backward(d_sigma, fp.sigma)

        grads: dict[str, np.ndarray] = {}
        d_feats = {kind: np.zeros_like(fp.feats[kind]) for kind in fp.kinds}

        grads["cls.weight"] = fp.feats["roi"].T @ d_s
        grads["cls.bias"] = d_s.sum(axis=0)
        d_feats["roi"] += d_s @ p["cls.weight"].T

        head = self.cfg.head
        if head == "baseline":
            grads["loc.weight"] = fp.feats["roi"].T @ d_l
            grads["loc.bias"] = d_l.sum(axis=0)
            d_feats["roi"] += d_l @ p["loc.weight"].T
        elif head == "additive":
            grads["loc_roi.weight"] = fp.feats["roi"].T @ d_l
            grads["loc_roi.bias"] = d_l.sum(axis=0)
            grads["loc_ctx.weight"] = fp.feats["context"].T @ d_l
            grads["loc_ctx.bias"] = d_l.sum(axis=0)
            d_feats["roi"] += d_l @ p["loc_roi.weight"].T
            d_feats["context"] += d_l @ p["loc_ctx.weight"].T
        else:
            primary = "frame" if head == "contrastive_s" else "roi"
            # Shared layer: gradients from both uses accumulate; the context
            # use carries a minus sign and the bias contributions cancel.
            grads["loc.weight"] = (fp.feats[primary] - fp.feats["context"]).T @ d_l
            grads["loc.bias"] = np.zeros_like(p["loc.bias"])
            d_feats[primary] += d_l @ p["loc.weight"].T
            d_feats["context"] -= d_l @ p["loc.weight"].T

        d_trunk_out = np.concatenate([d_feats[kind] for kind in fp.kinds])
        d_stacked, trunk_grads = trunk_backward(
            d_trunk_out, fp.trunk_cache, p["trunk1.weight"], p["trunk2.weight"]
        )
        grads.update(trunk_grads)

        d_fmap = np.zeros_like(fp.fmap.values)
        c_f, n = self.cfg.feature_channels, self.cfg.grid_n
        for i, kind in enumerate(fp.kinds):
            rows = d_stacked[i * k : (i + 1) * k]
            d_fmap += pool_batch_backward(rows.reshape(k, c_f, n, n), fp.pooled[kind])

        if fp.conv_cache is not None:
            conv_grads, _ = conv_backward(d_fmap, self._conv_params(), fp.conv_cache)
            for i, (dw, db) in enumerate(conv_grads):
                grads[f"conv{i}.weight"] = dw
                grads[f"conv{i}.bias"] = db

        return {name: grads[name] for name in self.params}

    def loss_and_grads(
        self,
        boxes: list[Box],
        y: np.ndarray,
        image: np.ndarray | None = None,
        fmap: FeatureMap | None = None,
    ) -> tuple[float, dict[str, np.ndarray], ForwardPass]:
        fp = self.forward(boxes, image=image, fmap=fmap)
        loss = hinge_loss(fp.image_scores, y)
        grads = self.backward(fp, hinge_loss_grad(fp.image_scores, y))
        return loss, grads, fp


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: TwoStreamModel) -> None:
    """Write parameters as a tensor container plus a text sidecar with dims."""
    from .features import save_container

    save_container(path, model.params)
    cfg = model.cfg
    lines = [
        f"head = {cfg.head}",
        f"num_classes = {cfg.num_classes}",
        f"grid_n = {cfg.grid_n}",
        f"context_ratio = {cfg.context_ratio!r}",
        f"trunk_dim = {cfg.trunk_dim}",
        f"feature_channels = {cfg.feature_channels}",
        f"feature_stride = {cfg.feature_stride}",
    ]
    if cfg.conv is not None:
        lines.append(f"conv_in_channels = {cfg.conv.in_channels}")
        lines.append("conv_channels = " + ",".join(str(c) for c in cfg.conv.channels))
        lines.append("conv_strides = " + ",".join(str(s) for s in cfg.conv.strides))
    else:
        lines.append("conv_channels = none")
    with open(str(path) + ".meta", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> TwoStreamModel:
    from .features import load_container

    meta: dict[str, str] = {}
    with open(str(path) + ".meta", "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    conv = None
    if meta.get("conv_channels", "none") != "none":
        conv = ConvConfig(
            in_channels=int(meta["conv_in_channels"]),
            channels=tuple(int(c) for c in meta["conv_channels"].split(",")),
            strides=tuple(int(s) for s in meta["conv_strides"].split(",")),
        )
    cfg = ModelConfig(
        num_classes=int(meta["num_classes"]),
        head=meta["head"],
        grid_n=int(meta["grid_n"]),
        context_ratio=float(meta["context_ratio"]),
        trunk_dim=int(meta["trunk_dim"]),
        feature_channels=int(meta["feature_channels"]),
        feature_stride=int(meta["feature_stride"]),
        conv=conv,
    )
    return TwoStreamModel(cfg, params=load_container(path))
