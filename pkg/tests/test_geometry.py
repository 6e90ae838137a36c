import numpy as np
import pytest
from hypothesis import given, strategies as st

from wsloc.geometry import (
    Box,
    CellRect,
    FeatureGeometry,
    box_from_voc,
    context_outer,
    filter_proposals,
    flip_box,
    frame_inner,
    iou,
    project_to_feature,
    rescale_box,
    scale_box,
)

coords = st.floats(min_value=-500, max_value=500, allow_nan=False, allow_infinity=False)
sides = st.floats(min_value=0.1, max_value=500, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw):
    x1, y1 = draw(coords), draw(coords)
    return Box(x1, y1, x1 + draw(sides), y1 + draw(sides))


class TestBox:
    def test_degenerate_raises(self):
        with pytest.raises(ValueError):
            Box(10, 0, 5, 10)
        with pytest.raises(ValueError):
            Box(0, 0, 10, 0)

    def test_voc_conversion(self):
        b = box_from_voc(1, 1, 10, 10)
        assert b.as_tuple() == (0.0, 0.0, 10.0, 10.0)


class TestIou:
    def test_identity(self):
        b = Box(0, 0, 10, 10)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0

    def test_half_overlap(self):
        # inter = 50, union = 150
        assert iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx(1 / 3)

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0 + 1e-12


class TestScaleBox:
    def test_identity(self):
        assert scale_box(Box(0, 0, 10, 10), 1.0).as_tuple() == (0, 0, 10, 10)

    def test_grow(self):
        assert scale_box(Box(0, 0, 10, 10), 1.8).as_tuple() == (-4, -4, 14, 14)

    def test_shrink(self):
        b = scale_box(Box(0, 0, 18, 18), 1 / 1.8)
        assert b.as_tuple() == pytest.approx((4, 4, 14, 14))

    def test_rejects_nonpositive_factor(self):
        with pytest.raises(ValueError):
            scale_box(Box(0, 0, 1, 1), 0.0)

    @given(boxes(), st.floats(min_value=0.2, max_value=5.0))
    def test_center_preserved_and_roundtrip(self, b, factor):
        s = scale_box(b, factor)
        assert s.center == pytest.approx(b.center, abs=1e-9)
        assert s.width == pytest.approx(b.width * factor, rel=1e-12)
        back = scale_box(s, 1 / factor)
        assert back.as_tuple() == pytest.approx(b.as_tuple(), abs=1e-9)


class TestContextAndFrame:
    def test_context_outer(self):
        b = context_outer(Box(10, 10, 28, 28))
        assert b.as_tuple() == pytest.approx((2.8, 2.8, 35.2, 35.2))

    def test_frame_inner(self):
        b = frame_inner(Box(0, 0, 10, 10))
        side = 10 / 1.8
        assert b.as_tuple() == pytest.approx(
            (5 - side / 2, 5 - side / 2, 5 + side / 2, 5 + side / 2)
        )

    def test_ratio_one_is_identity(self):
        b = Box(3, 4, 9, 11)
        assert frame_inner(b, 1.0).as_tuple() == pytest.approx(b.as_tuple())


class TestProjection:
    g = FeatureGeometry(stride=16, fmap_h=8, fmap_w=8)

    def test_two_by_two(self):
        assert project_to_feature(Box(0, 0, 32, 32), self.g) == CellRect(0, 1, 0, 1)

    def test_straddling(self):
        assert project_to_feature(Box(10, 10, 20, 20), self.g) == CellRect(0, 1, 0, 1)

    def test_single_cell(self):
        assert project_to_feature(Box(33, 33, 34, 34), self.g) == CellRect(2, 2, 2, 2)

    def test_out_of_bounds_clamps(self):
        r = project_to_feature(Box(-50, -50, -10, -10), self.g)
        assert r == CellRect(0, 0, 0, 0)
        r = project_to_feature(Box(500, 500, 600, 600), self.g)
        assert r == CellRect(7, 7, 7, 7)

    def test_projection_never_empty_and_monotone(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            x1, y1 = rng.uniform(-40, 120, 2)
            w, h = rng.uniform(0.5, 80, 2)
            b = Box(x1, y1, x1 + w, y1 + h)
            r = project_to_feature(b, self.g)
            assert 0 <= r.row_start <= r.row_end < self.g.fmap_h
            assert 0 <= r.col_start <= r.col_end < self.g.fmap_w
            grown = scale_box(b, 1.0 + rng.uniform(0, 1.5))
            rg = project_to_feature(grown, self.g)
            assert rg.row_start <= r.row_start and rg.row_end >= r.row_end
            assert rg.col_start <= r.col_start and rg.col_end >= r.col_end


class TestFilterProposals:
    def test_strictly_larger_kept(self):
        assert filter_proposals([Box(0, 0, 21, 21)]) == [Box(0, 0, 21, 21)]

    def test_exact_side_removed(self):
        assert filter_proposals([Box(0, 0, 20, 25)]) == []

    def test_mixed(self):
        kept = filter_proposals([Box(0, 0, 50, 50), Box(0, 0, 10, 50), Box(0, 0, 30, 30)])
        assert kept == [Box(0, 0, 50, 50), Box(0, 0, 30, 30)]

    def test_subsequence(self):
        rng = np.random.default_rng(1)
        boxes = []
        for _ in range(50):
            x1, y1 = rng.uniform(0, 50, 2)
            boxes.append(Box(x1, y1, x1 + rng.uniform(1, 60), y1 + rng.uniform(1, 60)))
        kept = filter_proposals(boxes)
        it = iter(boxes)
        assert all(b in it for b in kept)  # order-preserving subsequence


class TestFlipAndRescale:
    def test_flip(self):
        assert flip_box(Box(10, 0, 30, 20), 100).as_tuple() == (70, 0, 90, 20)

    def test_flip_centered_fixed_point(self):
        assert flip_box(Box(40, 0, 60, 20), 100).as_tuple() == (40, 0, 60, 20)

    def test_flip_involution(self):
        b = Box(3.5, 2.25, 17.5, 40.0)
        assert flip_box(flip_box(b, 128), 128) == b

    def test_rescale(self):
        assert rescale_box(Box(0, 0, 10, 10), 2, 2).as_tuple() == (0, 0, 20, 20)
        assert rescale_box(Box(5, 5, 10, 10), 1, 1).as_tuple() == (5, 5, 10, 10)
        assert rescale_box(Box(4, 8, 12, 16), 0.5, 0.25).as_tuple() == (2, 2, 6, 4)
