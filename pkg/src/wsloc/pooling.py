"""Fixed-size max pooling over grid regions: whole-region and ring-shaped.

All three pooling flavors (roi, context, frame) produce an (C, n, n) grid so
downstream layers can share weights regardless of which flavor fed them.
Per-bin argmax locations are recorded for the exact backward pass; bins whose
cell set is empty hold exactly 0 and carry argmax NONE (-1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import CellRect, FeatureGeometry

NONE_IDX = -1


@dataclass
class FeatureMap:
    """Dense C x H x W activation grid with its pixel geometry."""

    values: np.ndarray
    geometry: FeatureGeometry

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise ValueError("feature map must be C x H x W")
        c, h, w = self.values.shape
        if (h, w) != (self.geometry.fmap_h, self.geometry.fmap_w):
            raise ValueError("feature map shape disagrees with its geometry")

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass
class PooledFeature:
    """n x n max-pooled grid per channel plus argmax bookkeeping.

    `argmax` holds flat cell indices (row * fmap_w + col) into the source
    feature map, or NONE_IDX for bins that covered no cells.
    """

    values: np.ndarray  # (C, n, n)
    argmax: np.ndarray  # (C, n, n) int64
    pooling_type: str
    fmap_h: int
    fmap_w: int

    @property
    def grid_n(self) -> int:
        return self.values.shape[1]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


def _bin_spans(start: int, extent: int, n: int) -> list[tuple[int, int]]:
    # Half-open [lo, hi) absolute spans; bins share cells when extent < n,
    # so no bin of a whole-region pool is ever empty.
    return [
        (start + (i * extent) // n, start + math.ceil((i + 1) * extent / n))
        for i in range(n)
    ]


def _check_inside(region: CellRect, fmap: FeatureMap, what: str) -> None:
    if (
        region.row_start < 0
        or region.col_start < 0
        or region.row_end >= fmap.geometry.fmap_h
        or region.col_end >= fmap.geometry.fmap_w
    ):
        raise ValueError(f"{what} {region} outside feature grid")


def roi_pool(fmap: FeatureMap, region: CellRect, n: int = 6) -> PooledFeature:
    """Max-pool a cell rectangle into an n x n grid with adaptive bins."""
    _check_inside(region, fmap, "region")
    return _pool(fmap, region, hole=None, n=n, pooling_type="roi")


def frame_region_pool(
    fmap: FeatureMap,
    outer: CellRect,
    inner: CellRect | None,
    n: int = 6,
    pooling_type: str = "frame",
) -> PooledFeature:
    """Max-pool the ring of cells in `outer` that are not covered by `inner`.

    Bins partition `outer` exactly as roi_pool does; a cell participates only
    if it is not inside the (clipped) inner rectangle. Bins left with no cells
    get value 0 and argmax NONE. A non-overlapping or absent inner rectangle
    makes this identical to roi_pool.
    """
    _check_inside(outer, fmap, "outer region")
    hole = _clip(inner, outer) if inner is not None else None
    return _pool(fmap, outer, hole=hole, n=n, pooling_type=pooling_type)


def _clip(inner: CellRect, outer: CellRect) -> CellRect | None:
    rs = max(inner.row_start, outer.row_start)
    re = min(inner.row_end, outer.row_end)
    cs = max(inner.col_start, outer.col_start)
    ce = min(inner.col_end, outer.col_end)
    if re < rs or ce < cs:
        return None
    return CellRect(rs, re, cs, ce)


def _pool(
    fmap: FeatureMap,
    region: CellRect,
    hole: CellRect | None,
    n: int,
    pooling_type: str,
) -> PooledFeature:
    vals = fmap.values
    c = vals.shape[0]
    h_f, w_f = fmap.geometry.fmap_h, fmap.geometry.fmap_w
    rs, cs = region.row_start, region.col_start
    h, w = region.n_rows, region.n_cols
    work = vals[:, rs : rs + h, cs : cs + w]

    if hole is not None:
        keep = np.ones((h, w), dtype=bool)
        keep[
            hole.row_start - rs : hole.row_end - rs + 1,
            hole.col_start - cs : hole.col_end - cs + 1,
        ] = False
        if not keep.any():
            return PooledFeature(
                np.zeros((c, n, n), dtype=vals.dtype),
                np.full((c, n, n), NONE_IDX, dtype=np.int64),
                pooling_type,
                h_f,
                w_f,
            )
        work = np.where(keep, work, -np.inf)

    # Two-stage max: columns first, then rows, which makes argmax ties resolve
    # to the first cell in row-major order.
    col_max = np.empty((c, h, n), dtype=np.float64)
    col_arg = np.empty((c, h, n), dtype=np.int64)
    for j, (lo, hi) in enumerate(_bin_spans(0, w, n)):
        seg = work[:, :, lo:hi]
        am = seg.argmax(axis=2)
        col_max[:, :, j] = np.take_along_axis(seg, am[:, :, None], axis=2)[:, :, 0]
        col_arg[:, :, j] = am + lo

    pooled = np.empty((c, n, n), dtype=np.float64)
    row_idx = np.empty((c, n, n), dtype=np.int64)
    for i, (lo, hi) in enumerate(_bin_spans(0, h, n)):
        seg = col_max[:, lo:hi, :]
        am = seg.argmax(axis=1)
        pooled[:, i, :] = np.take_along_axis(seg, am[:, None, :], axis=1)[:, 0, :]
        row_idx[:, i, :] = am + lo

    col_idx = np.take_along_axis(col_arg, row_idx, axis=1)
    argmax = (rs + row_idx) * w_f + (cs + col_idx)
    if hole is not None:
        empty = np.isneginf(pooled)
        pooled[empty] = 0.0
        argmax[empty] = NONE_IDX
    return PooledFeature(pooled, argmax, pooling_type, h_f, w_f)


@dataclass
class PooledBatch:
    """Pooled grids for many regions of one pooling type over one feature map."""

    values: np.ndarray  # (K, C, n, n)
    argmax: np.ndarray  # (K, C, n, n)
    pooling_type: str
    fmap_h: int
    fmap_w: int


def _span_table(sizes: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(n)
    lo = (i[None, :] * sizes[:, None]) // n
    hi = -((-(i[None, :] + 1) * sizes[:, None]) // n)
    return lo, hi - lo


def pool_regions(
    fmap: FeatureMap,
    regions: list[CellRect],
    holes: list[CellRect | None],
    n: int = 6,
    pooling_type: str = "roi",
) -> PooledBatch:
    """Vectorized equivalent of roi_pool / frame_region_pool over many regions.

    Matches the per-region functions bin for bin, including argmax tie-breaks
    (verified by tests); the model uses this path for speed. The trick: every
    bin's cell set is materialized as one (K, n, n, sh, sw) index tensor in
    row-major cell order, padded by repeating each span's last cell (repeats
    sit after the original, so first-occurrence argmax is unaffected), and a
    single contiguous gather + argmax does all the pooling.
    """
    vals = fmap.values
    k = len(regions)
    c = vals.shape[0]
    h_f, w_f = fmap.geometry.fmap_h, fmap.geometry.fmap_w
    for region in regions:
        _check_inside(region, fmap, "region")
    rs = np.array([r.row_start for r in regions])
    cs = np.array([r.col_start for r in regions])
    heights = np.array([r.n_rows for r in regions])
    widths = np.array([r.n_cols for r in regions])

    lo_r, sh = _span_table(heights, n)
    lo_c, sw = _span_table(widths, n)
    shmax, swmax = int(sh.max()), int(sw.max())
    tr, tc = np.arange(shmax), np.arange(swmax)
    rows = rs[:, None, None] + lo_r[:, :, None] + np.minimum(tr, sh[:, :, None] - 1)
    cols = cs[:, None, None] + lo_c[:, :, None] + np.minimum(tc, sw[:, :, None] - 1)
    r_full = rows[:, :, None, :, None]  # (K, n, 1, shmax, 1)
    c_full = cols[:, None, :, None, :]  # (K, 1, n, 1, swmax)
    cell_idx = (r_full * w_f + c_full).reshape(k, n, n, shmax * swmax)

    s = shmax * swmax
    src = vals.reshape(c, -1)
    gather_idx = cell_idx
    have_holes = any(h is not None for h in holes)
    if have_holes:
        # Hole cells are redirected to a sentinel -inf column so masking
        # happens on the small index tensor, not on the gathered values.
        hr0 = np.full(k, -1)
        hr1 = np.full(k, -2)
        hc0 = np.full(k, -1)
        hc1 = np.full(k, -2)
        for ki, hole in enumerate(holes):
            if hole is None:
                continue
            clipped = _clip(hole, regions[ki])
            if clipped is None:
                continue
            hr0[ki], hr1[ki] = clipped.row_start, clipped.row_end
            hc0[ki], hc1[ki] = clipped.col_start, clipped.col_end
        in_rows = (r_full >= hr0[:, None, None, None, None]) & (
            r_full <= hr1[:, None, None, None, None]
        )
        in_cols = (c_full >= hc0[:, None, None, None, None]) & (
            c_full <= hc1[:, None, None, None, None]
        )
        hole_mask = (in_rows & in_cols).reshape(k, n, n, s)
        src = np.concatenate([src, np.full((c, 1), -np.inf)], axis=1)
        gather_idx = np.where(hole_mask, h_f * w_f, cell_idx)

    flat = np.take(src, gather_idx.reshape(-1), axis=1).reshape(c, k * n * n, s)
    am = flat.argmax(axis=2)  # (C, K*n*n)
    value_ofs = (np.arange(c * k * n * n) * s).reshape(c, k * n * n)
    pooled = flat.reshape(-1)[value_ofs + am]
    cell_ofs = (np.arange(k * n * n) * s)[None]
    argmax = cell_idx.reshape(-1)[cell_ofs + am]

    if have_holes:
        empty = np.isneginf(pooled)
        if empty.any():
            pooled = np.where(empty, 0.0, pooled)
            argmax = np.where(empty, NONE_IDX, argmax)
    values = pooled.reshape(c, k, n, n).transpose(1, 0, 2, 3)
    argmax = argmax.reshape(c, k, n, n).transpose(1, 0, 2, 3)
    return PooledBatch(values, argmax, pooling_type, h_f, w_f)


def pool_batch_backward(pooled_grads: np.ndarray, batch: PooledBatch) -> np.ndarray:
    """Scatter (K, C, n, n) upstream gradients back onto the feature map."""
    if pooled_grads.shape != batch.values.shape:
        raise ValueError(
            f"gradient shape {pooled_grads.shape} does not match {batch.values.shape}"
        )
    k, c = batch.values.shape[:2]
    cells = batch.fmap_h * batch.fmap_w
    chan = np.arange(c)[None, :, None, None]
    flat = chan * cells + batch.argmax
    mask = batch.argmax != NONE_IDX
    out = np.bincount(
        flat[mask].astype(np.int64), weights=pooled_grads[mask], minlength=c * cells
    )
    return out.reshape(c, batch.fmap_h, batch.fmap_w)


def pool_backward(pooled_grad: np.ndarray, pooled: PooledFeature) -> np.ndarray:
    """Scatter per-bin gradients back to their argmax cells (summing collisions)."""
    if pooled_grad.shape != pooled.values.shape:
        raise ValueError(
            f"gradient shape {pooled_grad.shape} does not match pooled shape {pooled.values.shape}"
        )
    c = pooled.values.shape[0]
    cells = pooled.fmap_h * pooled.fmap_w
    idx = pooled.argmax.reshape(c, -1)
    grads = pooled_grad.reshape(c, -1)
    mask = idx != NONE_IDX
    chan = np.broadcast_to(np.arange(c)[:, None], idx.shape)
    flat = np.bincount(
        (chan[mask] * cells + idx[mask]).astype(np.int64),
        weights=grads[mask],
        minlength=c * cells,
    )
    return flat.reshape(c, pooled.fmap_h, pooled.fmap_w).astype(pooled_grad.dtype)
