"""Finite-difference verification of every backward pass.

Each check builds a small random instance, computes analytic gradients, and
compares them against central differences (h = 1e-5) in float64. Relative
error uses max(|analytic|, |numeric|, 1e-5) as the denominator so dead units
with near-zero gradients do not blow up the ratio.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .features import ConvConfig, conv_backward, conv_forward, init_conv_params
from .geometry import Box, CellRect, FeatureGeometry
from .model import (
    HEAD_VARIANTS,
    ModelConfig,
    TwoStreamModel,
    head_additive,
    head_baseline,
    head_contrastive_a,
    hinge_loss,
    hinge_loss_grad,
    image_scores,
    softmax_over_rois,
    softmax_over_rois_backward,
    trunk_backward,
    trunk_forward,
)
from .pooling import FeatureMap, frame_region_pool, pool_backward, roi_pool

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOLERANCE


def fd_gradient(fn: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of fn() with respect to arr (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn()
        flat[i] = orig - h
        f_minus = fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-5)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _combine(*errs: float) -> float:
    return max(errs) if errs else 0.0


def check_pooling(kind: str, rng: np.random.Generator) -> CheckResult:
    fmap = FeatureMap(rng.normal(size=(3, 9, 7)), FeatureGeometry(8, 9, 7))
    upstream = rng.normal(size=(3, 3, 3))
    if kind == "roi":
        pool = lambda: roi_pool(fmap, CellRect(1, 6, 0, 5), n=3)
    elif kind == "context":
        pool = lambda: frame_region_pool(
            fmap, CellRect(0, 8, 0, 6), CellRect(2, 5, 2, 4), n=3, pooling_type="context"
        )
    else:
        pool = lambda: frame_region_pool(fmap, CellRect(1, 7, 1, 6), CellRect(3, 5, 3, 4), n=3)
    analytic = pool_backward(upstream, pool())
    numeric = fd_gradient(lambda: float((pool().values * upstream).sum()), fmap.values)
    return CheckResult(f"pooling/{kind}", max_rel_err(analytic, numeric))


def check_conv(rng: np.random.Generator) -> CheckResult:
    cfg = ConvConfig(in_channels=1, channels=(2, 3), strides=(2, 1))
    params = init_conv_params(cfg, rng)
    image = rng.normal(size=(1, 8, 8))
    upstream = rng.normal(size=(3, 4, 4))

    def loss() -> float:
        fmap, _ = conv_forward(image, params, cfg)
        return float((fmap.values * upstream).sum())

    fmap, cache = conv_forward(image, params, cfg)
    grads, d_image = conv_backward(upstream, params, cache)
    errs = [max_rel_err(d_image, fd_gradient(loss, image))]
    for (dw, db), (w, b) in zip(grads, params):
        errs.append(max_rel_err(dw, fd_gradient(loss, w)))
        errs.append(max_rel_err(db, fd_gradient(loss, b)))
    return CheckResult("conv_stack", _combine(*errs))


def check_trunk(rng: np.random.Generator) -> CheckResult:
    x = rng.normal(size=(5, 12))
    w1, b1 = rng.normal(size=(12, 8)), rng.normal(size=8)
    w2, b2 = rng.normal(size=(8, 8)), rng.normal(size=8)
    upstream = rng.normal(size=(5, 8))

    def loss() -> float:
        out, _ = trunk_forward(x, w1, b1, w2, b2)
        return float((out * upstream).sum())

    out, cache = trunk_forward(x, w1, b1, w2, b2)
    d_x, grads = trunk_backward(upstream, cache, w1, w2)
    errs = [
        max_rel_err(d_x, fd_gradient(loss, x)),
        max_rel_err(grads["trunk1.weight"], fd_gradient(loss, w1)),
        max_rel_err(grads["trunk1.bias"], fd_gradient(loss, b1)),
        max_rel_err(grads["trunk2.weight"], fd_gradient(loss, w2)),
        max_rel_err(grads["trunk2.bias"], fd_gradient(loss, b2)),
    ]
    return CheckResult("trunk", _combine(*errs))


def check_classification(rng: np.random.Generator) -> CheckResult:
    f = rng.normal(size=(4, 6))
    w, b = rng.normal(size=(6, 3)), rng.normal(size=3)
    upstream = rng.normal(size=(4, 3))

    loss = lambda: float(((f @ w + b) * upstream).sum())
    errs = [
        max_rel_err(f.T @ upstream, fd_gradient(loss, w)),
        max_rel_err(upstream.sum(axis=0), fd_gradient(loss, b)),
        max_rel_err(upstream @ w.T, fd_gradient(loss, f)),
    ]
    return CheckResult("classification", _combine(*errs))


def check_head(head: str, rng: np.random.Generator) -> CheckResult:
    f1 = rng.normal(size=(4, 6))
    f2 = rng.normal(size=(4, 6))
    w, b = rng.normal(size=(6, 3)), rng.normal(size=3)
    w2, b2 = rng.normal(size=(6, 3)), rng.normal(size=3)
    upstream = rng.normal(size=(4, 3))

    if head == "baseline":
        loss = lambda: float((head_baseline(f1, w, b).scores * upstream).sum())
        analytic = {
            "w": f1.T @ upstream,
            "b": upstream.sum(axis=0),
            "f1": upstream @ w.T,
        }
        arrays = {"w": w, "b": b, "f1": f1}
    elif head == "additive":
        loss = lambda: float((head_additive(f1, f2, w, b, w2, b2).scores * upstream).sum())
        analytic = {
            "w": f1.T @ upstream,
            "b": upstream.sum(axis=0),
            "w2": f2.T @ upstream,
            "b2": upstream.sum(axis=0),
            "f1": upstream @ w.T,
            "f2": upstream @ w2.T,
        }
        arrays = {"w": w, "b": b, "w2": w2, "b2": b2, "f1": f1, "f2": f2}
    else:  # shared-layer contrastive (same math for A and S)
        loss = lambda: float((head_contrastive_a(f1, f2, w, b).scores * upstream).sum())
        analytic = {
            "w": (f1 - f2).T @ upstream,
            "b": np.zeros_like(b),
            "f1": upstream @ w.T,
            "f2": -(upstream @ w.T),
        }
        arrays = {"w": w, "b": b, "f1": f1, "f2": f2}

    errs = [max_rel_err(analytic[k], fd_gradient(loss, arrays[k])) for k in arrays]
    return CheckResult(f"head/{head}", _combine(*errs))


def check_fusion(rng: np.random.Generator) -> CheckResult:
    """Softmax over ROIs + multiplicative fusion + hinge, against FD."""
    k, c = 5, 3
    while True:
        s = rng.normal(size=(k, c))
        l_mat = rng.normal(size=(k, c))
        y = rng.choice([-1.0, 1.0], size=c)
        sigma = softmax_over_rois(l_mat)
        f = image_scores(s, sigma)
        if np.min(np.abs(1.0 - y * f)) > 0.05:  # keep away from the hinge kink
            break

    def loss() -> float:
        sig = softmax_over_rois(l_mat)
        return hinge_loss(image_scores(s, sig), y)

    sigma = softmax_over_rois(l_mat)
    d_f = hinge_loss_grad(image_scores(s, sigma), y)
    d_final = np.broadcast_to(d_f, (k, c))
    d_s = d_final * sigma
    d_l = softmax_over_rois_backward(d_final * s, sigma)
    errs = [
        max_rel_err(d_s, fd_gradient(loss, s)),
        max_rel_err(d_l, fd_gradient(loss, l_mat)),
    ]
    return CheckResult("softmax_fusion_hinge", _combine(*errs))


def check_full_model(head: str, rng: np.random.Generator) -> CheckResult:
    cfg = ModelConfig(
        num_classes=2,
        head=head,
        grid_n=2,
        trunk_dim=8,
        feature_channels=3,
        feature_stride=4,
        conv=ConvConfig(in_channels=1, channels=(2, 3), strides=(2, 2)),
    )
    model = TwoStreamModel(cfg, rng=rng)
    image = rng.normal(size=(1, 16, 16)) * 0.5
    boxes = [Box(1.5, 2.0, 9.0, 10.0), Box(4.0, 4.0, 15.0, 16.0), Box(0.0, 0.0, 16.0, 16.0)]
    y = np.array([1.0, -1.0])

    def loss() -> float:
        fp = model.forward(boxes, image=image)
        return hinge_loss(fp.image_scores, y)

    _, grads, _ = model.loss_and_grads(boxes, y, image=image)
    errs = [
        max_rel_err(grads[name], fd_gradient(loss, model.params[name]))
        for name in model.params
    ]
    return CheckResult(f"full_model/{head}", _combine(*errs))


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [
        check_trunk(rng),
        check_classification(rng),
        check_fusion(rng),
        check_conv(rng),
    ]
    for kind in ("roi", "context", "frame"):
        results.append(check_pooling(kind, rng))
    for head in ("baseline", "additive", "contrastive"):
        results.append(check_head(head, rng))
    for head in HEAD_VARIANTS:
        results.append(check_full_model(head, rng))
    return results
