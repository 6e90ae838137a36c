import math

import numpy as np
import pytest

from wsloc.geometry import Box, CellRect, FeatureGeometry, context_outer, frame_inner, project_to_feature
from wsloc.gradcheck import fd_gradient, max_rel_err
from wsloc.pooling import (
    NONE_IDX,
    FeatureMap,
    frame_region_pool,
    pool_backward,
    roi_pool,
)


def make_fmap(values):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    _, h, w = values.shape
    return FeatureMap(values, FeatureGeometry(stride=8, fmap_h=h, fmap_w=w))


def brute_force_pool(values, region, hole, n):
    """Slow oracle: enumerate every participating cell of every bin."""
    c = values.shape[0]
    out = np.zeros((c, n, n))
    arg = np.full((c, n, n), NONE_IDX, dtype=np.int64)
    h = region.row_end - region.row_start + 1
    w = region.col_end - region.col_start + 1
    width = values.shape[2]
    for i in range(n):
        r_lo = region.row_start + (i * h) // n
        r_hi = region.row_start + math.ceil((i + 1) * h / n)
        for j in range(n):
            c_lo = region.col_start + (j * w) // n
            c_hi = region.col_start + math.ceil((j + 1) * w / n)
            cells = [
                (r, cc)
                for r in range(r_lo, r_hi)
                for cc in range(c_lo, c_hi)
                if hole is None
                or not (
                    hole.row_start <= r <= hole.row_end
                    and hole.col_start <= cc <= hole.col_end
                )
            ]
            if not cells:
                continue
            for ch in range(c):
                best = max(cells, key=lambda rc: values[ch, rc[0], rc[1]])
                out[ch, i, j] = values[ch, best[0], best[1]]
                arg[ch, i, j] = best[0] * width + best[1]
    return out, arg


FOUR_BY_FOUR = np.arange(16, dtype=np.float64).reshape(4, 4)


class TestRoiPool:
    def test_quadrants(self):
        p = roi_pool(make_fmap(FOUR_BY_FOUR), CellRect(0, 3, 0, 3), n=2)
        assert np.array_equal(p.values[0], [[5, 7], [13, 15]])

    def test_constant_map(self):
        p = roi_pool(make_fmap(np.full((4, 4), 3.25)), CellRect(1, 3, 0, 2), n=3)
        assert np.all(p.values == 3.25)

    def test_single_cell_region_fills_all_bins(self):
        p = roi_pool(make_fmap(FOUR_BY_FOUR), CellRect(2, 2, 1, 1), n=2)
        assert np.all(p.values[0] == FOUR_BY_FOUR[2, 1])

    def test_region_outside_grid_raises(self):
        with pytest.raises(ValueError):
            roi_pool(make_fmap(FOUR_BY_FOUR), CellRect(0, 4, 0, 3), n=2)


class TestFrameRegionPool:
    def test_border_ring(self):
        p = frame_region_pool(
            make_fmap(FOUR_BY_FOUR), CellRect(0, 3, 0, 3), CellRect(1, 2, 1, 2), n=2
        )
        # bin (0,0) sees only border cells {0,1,4}: the hole removes cell 5
        assert np.array_equal(p.values[0], [[4, 7], [13, 15]])

    def test_hole_covering_everything_zeroes_output(self):
        outer = CellRect(0, 3, 0, 3)
        p = frame_region_pool(make_fmap(FOUR_BY_FOUR), outer, outer, n=2)
        assert np.all(p.values == 0.0)
        assert np.all(p.argmax == NONE_IDX)

    def test_disjoint_hole_equals_roi_pool(self):
        fmap = make_fmap(FOUR_BY_FOUR)
        outer = CellRect(0, 1, 0, 1)
        p = frame_region_pool(fmap, outer, CellRect(3, 3, 3, 3), n=2)
        q = roi_pool(fmap, outer, n=2)
        assert np.array_equal(p.values, q.values)
        assert np.array_equal(p.argmax, q.argmax)

    def test_missing_hole_equals_roi_pool(self):
        fmap = make_fmap(FOUR_BY_FOUR)
        p = frame_region_pool(fmap, CellRect(0, 3, 0, 3), None, n=3)
        q = roi_pool(fmap, CellRect(0, 3, 0, 3), n=3)
        assert np.array_equal(p.values, q.values)


class TestOracleEquivalence:
    def _random_rect(self, rng, h, w):
        r0 = int(rng.integers(h))
        r1 = int(rng.integers(r0, h))
        c0 = int(rng.integers(w))
        c1 = int(rng.integers(c0, w))
        return CellRect(r0, r1, c0, c1)

    def test_roi_pool_matches_brute_force(self):
        rng = np.random.default_rng(42)
        for _ in range(120):
            c, h, w = rng.integers(1, 4), rng.integers(2, 12), rng.integers(2, 12)
            fmap = make_fmap(rng.normal(size=(int(c), int(h), int(w))))
            region = self._random_rect(rng, int(h), int(w))
            n = int(rng.integers(1, 7))
            p = roi_pool(fmap, region, n)
            values, arg = brute_force_pool(fmap.values, region, None, n)
            assert np.array_equal(p.values, values)
            assert np.array_equal(p.argmax, arg)

    def test_frame_pool_matches_brute_force(self):
        rng = np.random.default_rng(43)
        for _ in range(120):
            c, h, w = rng.integers(1, 4), rng.integers(2, 12), rng.integers(2, 12)
            fmap = make_fmap(rng.normal(size=(int(c), int(h), int(w))))
            outer = self._random_rect(rng, int(h), int(w))
            inner = self._random_rect(rng, int(h), int(w))
            n = int(rng.integers(1, 7))
            p = frame_region_pool(fmap, outer, inner, n)
            clipped = CellRect(
                max(inner.row_start, outer.row_start),
                min(inner.row_end, outer.row_end),
                max(inner.col_start, outer.col_start),
                min(inner.col_end, outer.col_end),
            ) if not (
                inner.row_start > outer.row_end
                or inner.row_end < outer.row_start
                or inner.col_start > outer.col_end
                or inner.col_end < outer.col_start
            ) else None
            values, arg = brute_force_pool(fmap.values, outer, clipped, n)
            assert np.array_equal(p.values, values)
            assert np.array_equal(p.argmax, arg)


class TestShapeIdentity:
    def test_context_and_frame_pool_same_shape(self):
        rng = np.random.default_rng(7)
        fmap = make_fmap(rng.normal(size=(2, 16, 16)))
        geom = fmap.geometry
        for _ in range(100):
            x1, y1 = rng.uniform(0, 100, 2)
            box = Box(x1, y1, x1 + rng.uniform(5, 60), y1 + rng.uniform(5, 60))
            n = int(rng.integers(1, 8))
            roi_rect = project_to_feature(box, geom)
            ctx = frame_region_pool(
                fmap,
                project_to_feature(context_outer(box), geom),
                roi_rect,
                n,
                pooling_type="context",
            )
            frm = frame_region_pool(
                fmap, roi_rect, project_to_feature(frame_inner(box), geom), n
            )
            assert ctx.values.shape == frm.values.shape == (2, n, n)


class TestBatchedPooling:
    """The vectorized multi-region path must match the per-region functions
    exactly, including argmax tie-breaking (hence integer-valued maps)."""

    def _random_rect(self, rng, h, w):
        r0 = int(rng.integers(h))
        r1 = int(rng.integers(r0, h))
        c0 = int(rng.integers(w))
        c1 = int(rng.integers(c0, w))
        return CellRect(r0, r1, c0, c1)

    def test_matches_per_region_pooling(self):
        from wsloc.pooling import pool_regions

        rng = np.random.default_rng(99)
        for _ in range(40):
            c, h, w = int(rng.integers(1, 4)), int(rng.integers(3, 14)), int(rng.integers(3, 14))
            fmap = make_fmap(rng.integers(0, 5, size=(c, h, w)).astype(np.float64))
            k = int(rng.integers(1, 6))
            regions = [self._random_rect(rng, h, w) for _ in range(k)]
            holes = [
                self._random_rect(rng, h, w) if rng.random() < 0.6 else None
                for _ in range(k)
            ]
            n = int(rng.integers(1, 7))
            batch = pool_regions(fmap, regions, holes, n, "context")
            for ki in range(k):
                if holes[ki] is None:
                    single = roi_pool(fmap, regions[ki], n)
                else:
                    single = frame_region_pool(fmap, regions[ki], holes[ki], n)
                assert np.array_equal(batch.values[ki], single.values)
                assert np.array_equal(batch.argmax[ki], single.argmax)

    def test_batch_backward_matches_sum_of_single_backwards(self):
        from wsloc.pooling import pool_batch_backward, pool_regions

        rng = np.random.default_rng(100)
        fmap = make_fmap(rng.normal(size=(2, 9, 9)))
        regions = [CellRect(0, 5, 0, 5), CellRect(2, 8, 3, 8), CellRect(4, 4, 4, 4)]
        holes = [CellRect(1, 3, 1, 3), None, None]
        batch = pool_regions(fmap, regions, holes, 3, "context")
        grads = rng.normal(size=batch.values.shape)
        total = pool_batch_backward(grads, batch)
        expected = np.zeros_like(fmap.values)
        for ki in range(3):
            if holes[ki] is None:
                single = roi_pool(fmap, regions[ki], 3)
            else:
                single = frame_region_pool(fmap, regions[ki], holes[ki], 3)
            expected += pool_backward(grads[ki], single)
        assert np.allclose(total, expected, atol=1e-12)


class TestBackward:
    def test_gradient_lands_on_argmax_cells(self):
        p = roi_pool(make_fmap(FOUR_BY_FOUR), CellRect(0, 3, 0, 3), n=2)
        g = pool_backward(np.ones_like(p.values), p)
        expected = np.zeros((4, 4))
        for r, c in [(1, 1), (1, 3), (3, 1), (3, 3)]:  # cells holding 5, 7, 13, 15
            expected[r, c] = 1.0
        assert np.array_equal(g[0], expected)

    def test_zero_upstream(self):
        p = roi_pool(make_fmap(FOUR_BY_FOUR), CellRect(0, 3, 0, 3), n=2)
        assert np.all(pool_backward(np.zeros_like(p.values), p) == 0.0)

    def test_all_none_bins_give_zero_gradient(self):
        outer = CellRect(0, 3, 0, 3)
        p = frame_region_pool(make_fmap(FOUR_BY_FOUR), outer, outer, n=2)
        assert np.all(pool_backward(np.ones_like(p.values), p) == 0.0)

    def test_shared_cells_accumulate(self):
        p = roi_pool(make_fmap(FOUR_BY_FOUR), CellRect(2, 2, 1, 1), n=2)
        g = pool_backward(np.ones_like(p.values), p)
        assert g[0, 2, 1] == 4.0  # all four bins point at the single cell

    def test_shape_mismatch_raises(self):
        p = roi_pool(make_fmap(FOUR_BY_FOUR), CellRect(0, 3, 0, 3), n=2)
        with pytest.raises(ValueError):
            pool_backward(np.zeros((1, 3, 3)), p)

    def test_finite_differences(self):
        rng = np.random.default_rng(5)
        fmap = make_fmap(rng.normal(size=(2, 7, 9)))
        upstream = rng.normal(size=(2, 3, 3))

        def loss():
            p = frame_region_pool(fmap, CellRect(0, 6, 1, 8), CellRect(2, 4, 3, 6), n=3)
            return float((p.values * upstream).sum())

        p = frame_region_pool(fmap, CellRect(0, 6, 1, 8), CellRect(2, 4, 3, 6), n=3)
        analytic = pool_backward(upstream, p)
        numeric = fd_gradient(loss, fmap.values)
        assert max_rel_err(analytic, numeric) <= 1e-4


class TestMonotonicity:
    def test_raising_a_cell_never_lowers_containing_bins(self):
        rng = np.random.default_rng(11)
        for _ in range(60):
            values = rng.normal(size=(1, 6, 6))
            fmap = make_fmap(values.copy())
            region = CellRect(0, 5, 0, 5)
            n = 3
            before = roi_pool(fmap, region, n).values.copy()
            r, c = int(rng.integers(6)), int(rng.integers(6))
            bumped = values.copy()
            bumped[0, r, c] += float(rng.uniform(0.1, 3.0))
            after = roi_pool(make_fmap(bumped), region, n).values
            h = w = 6
            for i in range(n):
                rows = range((i * h) // n, math.ceil((i + 1) * h / n))
                for j in range(n):
                    cols = range((j * w) // n, math.ceil((j + 1) * w / n))
                    if r in rows and c in cols:
                        assert after[0, i, j] >= before[0, i, j] - 1e-12
                    else:
                        assert after[0, i, j] == before[0, i, j]
