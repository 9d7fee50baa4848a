from __future__ import annotations

import itertools
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popeye.geometry import (
    NORMALIZED,
    CoordSpace,
    DegenerateQuad,
    GeometryError,
    HBox,
    OBox,
    OutOfBounds,
    Polygon,
    SelfIntersecting,
    SpaceMismatch,
    box_iou,
    canonicalize_quad,
    clamp_box,
    hbb_iou,
    hbox_to_quad,
    is_canonical,
    polygon_area,
    polygon_clip,
    quad_bounding_hbox,
    quad_iou,
    rescale,
    signed_area,
)

from generators import CENTERED_SQUARE, random_convex_quad, rotated_unit_square
from oracles import raster_areas, raster_iou


class TestCoordSpace:
    def test_pixel_requires_positive_size(self):
        with pytest.raises(GeometryError):
            CoordSpace.pixel(0, 10)

    def test_normalized_extent(self):
        assert NORMALIZED.extent == (1.0, 1.0)
        assert CoordSpace.pixel(640, 480).extent == (640.0, 480.0)


class TestBoxes:
    def test_hbox_rejects_inverted(self):
        with pytest.raises(GeometryError):
            HBox(0.5, 0.1, 0.4, 0.2)

    def test_hbox_rejects_nan(self):
        with pytest.raises(GeometryError):
            HBox(0.0, float("nan"), 0.4, 0.2)

    def test_obox_needs_four_vertices(self):
        with pytest.raises(GeometryError):
            OBox(((0, 0), (1, 0), (1, 1)))


class TestCanonicalize:
    def test_documented_ordering(self):
        q = canonicalize_quad([(5, 5), (1, 1), (5, 1), (1, 5)], CoordSpace.pixel(10, 10))
        assert q.vertices == ((1, 1), (5, 1), (5, 5), (1, 5))
        assert q.canonical

    def test_all_24_permutations_agree(self):
        square = [(0, 0), (1, 0), (1, 1), (0, 1)]
        outs = {canonicalize_quad(list(p)).vertices for p in itertools.permutations(square)}
        assert outs == {((0, 0), (1, 0), (1, 1), (0, 1))}

    def test_self_intersecting_order_is_repaired(self):
        bowtie = [(0, 0), (1, 1), (1, 0), (0, 1)]
        assert canonicalize_quad(bowtie).vertices == ((0, 0), (1, 0), (1, 1), (0, 1))

    def test_point_inside_triangle_rejected(self):
        with pytest.raises(SelfIntersecting):
            canonicalize_quad([(0, 0), (1, 0), (0, 1), (0.2, 0.2)])

    def test_collinear_rejected_as_degenerate(self):
        with pytest.raises(DegenerateQuad):
            canonicalize_quad([(0, 0), (0.1, 0.1), (0.2, 0.2), (0.3, 0.3)])

    def test_equidistant_tie_prefers_smaller_angle(self):
        # (0.3, 0.4) and (0.4, 0.3) are both at distance 0.5 from the origin
        q = canonicalize_quad([(0.3, 0.4), (0.4, 0.3), (0.9, 0.6), (0.6, 0.9)])
        assert q.vertices[0] == (0.4, 0.3)

    def test_positive_orientation(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            q = canonicalize_quad(random_convex_quad(rng))
            assert signed_area(q.vertices) > 0

    def test_idempotent_and_permutation_invariant_random(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            pts = random_convex_quad(rng)
            q = canonicalize_quad(pts)
            assert canonicalize_quad(q.vertices) == q
            perm = [pts[i] for i in rng.permutation(4)]
            assert canonicalize_quad(perm).vertices == q.vertices

    def test_is_canonical(self):
        q = canonicalize_quad([(0.2, 0.2), (0.6, 0.2), (0.6, 0.5), (0.2, 0.5)])
        assert is_canonical(q)
        assert not is_canonical(OBox(q.vertices[::-1]))


class TestHbbIou:
    def test_identity_and_disjoint(self):
        a = HBox(0, 0, 1, 1)
        assert hbb_iou(a, a) == 1.0
        s = CoordSpace.pixel(4, 4)
        assert hbb_iou(HBox(0, 0, 1, 1, s), HBox(2, 2, 3, 3, s)) == 0.0

    def test_one_seventh_closed_form_and_raster(self):
        s = CoordSpace.pixel(3, 3)
        a, b = HBox(0, 0, 2, 2, s), HBox(1, 1, 3, 3, s)
        assert hbb_iou(a, b) == pytest.approx(1 / 7, abs=1e-12)
        ra = [(0, 0), (2, 0), (2, 2), (0, 2)]
        rb = [(1, 1), (3, 1), (3, 3), (1, 3)]
        assert raster_iou(ra, rb, n=300, lo=0, hi=3) == pytest.approx(1 / 7, abs=2e-3)

    def test_space_mismatch(self):
        with pytest.raises(SpaceMismatch):
            hbb_iou(HBox(0, 0, 1, 1), HBox(0, 0, 1, 1, CoordSpace.pixel(2, 2)))


class TestPolygon:
    def test_areas(self):
        assert polygon_area([(0, 0), (1, 0), (1, 1), (0, 1)]) == 1.0
        assert polygon_area([(0, 0), (1, 1), (2, 2)]) == 0.0
        assert polygon_area([(0, 0), (4, 0), (0, 3)]) == 6.0

    def test_clip_by_self(self):
        sq = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
        out = polygon_clip(sq, sq)
        assert set(out.vertices) == set(sq.vertices)

    def test_clip_disjoint_is_empty(self):
        a = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
        b = Polygon([(2, 2), (3, 2), (3, 3), (2, 3)])
        assert polygon_clip(a, b).is_empty

    def test_clip_octagon_against_raster(self):
        inter = polygon_clip(Polygon(CENTERED_SQUARE), Polygon(rotated_unit_square()))
        assert len(inter) == 8
        expected = 2 * (math.sqrt(2) - 1)
        assert polygon_area(inter) == pytest.approx(expected, abs=1e-12)
        _, _, raster = raster_areas(CENTERED_SQUARE, rotated_unit_square(), n=1000, lo=-1, hi=1)
        assert abs(polygon_area(inter) - raster) < 2e-3

    def test_clip_accepts_clockwise_clip_polygon(self):
        a = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
        b = Polygon([(0.5, 0.5), (0.5, 1.5), (1.5, 1.5), (1.5, 0.5)])
        assert polygon_area(polygon_clip(a, b)) == pytest.approx(0.25)


class TestQuadIou:
    def test_rotated_square_is_inv_sqrt2(self):
        a = canonicalize_quad(CENTERED_SQUARE)
        b = canonicalize_quad(rotated_unit_square())
        assert quad_iou(a, b) == pytest.approx(1 / math.sqrt(2), abs=1e-6)

    def test_identical(self):
        q = canonicalize_quad(random_convex_quad(np.random.default_rng(0)))
        assert quad_iou(q, q) == pytest.approx(1.0, abs=1e-12)

    def test_matches_hbb_iou_on_axis_aligned(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            x =np.sort(rng.uniform(0, 1, (2, 2)), axis=1)
            y = np.sort(rng.uniform(0, 1, (2, 2)), axis=1)
            a = HBox(x[0, 0], y[0, 0], x[0, 1], y[0, 1])
            b = HBox(x[1, 0], y[1, 0], x[1, 1], y[1, 1])
            if a.area < 1e-6 or b.area < 1e-6:
                continue
            assert quad_iou(hbox_to_quad(a), hbox_to_quad(b)) == pytest.approx(hbb_iou(a, b), abs=1e-9)

    def test_raster_agreement_sample(self):
        rng = np.random.default_rng(21)
        for _ in range(25):
            pa, pb = random_convex_quad(rng), random_convex_quad(rng)
            got = quad_iou(canonicalize_quad(pa), canonicalize_quad(pb))
            assert abs(got - raster_iou(pa, pb, n=1000)) <= 2e-3

    def test_box_iou_kind_mismatch(self):
        with pytest.raises(GeometryError):
            box_iou(HBox(0, 0, 1, 1), hbox_to_quad(HBox(0, 0, 1, 1)))


class TestConversions:
    def test_hbox_quad_round_trip(self):
        h = HBox(0.1, 0.2, 0.4, 0.9)
        q = hbox_to_quad(h)
        assert q.area == pytest.approx(h.area)
        assert quad_bounding_hbox(q) == h

    def test_unit_hbox_quad_area(self):
        assert hbox_to_quad(HBox(0, 0, 1, 1)).area == 1.0

    def test_bounding_box_of_rotated_square(self):
        q = OBox(tuple(rotated_unit_square()))
        h = quad_bounding_hbox(q)
        r = math.sqrt(2) / 2
        assert h.as_tuple() == pytest.approx((-r, -r, r, r), abs=1e-9)

    def test_rescale_pixel_to_normalized(self):
        s = CoordSpace.pixel(100, 100)
        out = rescale(HBox(10, 20, 50, 60, s), s, NORMALIZED)
        assert out.as_tuple() == pytest.approx((0.1, 0.2, 0.5, 0.6))
        full = rescale(HBox(0, 0, 1, 1), NORMALIZED, CoordSpace.pixel(640, 480))
        assert full.as_tuple() == (0, 0, 640, 480)

    def test_rescale_out_of_bounds(self):
        s = CoordSpace.pixel(100, 100)
        with pytest.raises(OutOfBounds):
            rescale(HBox(10, 20, 101, 60, s), s, NORMALIZED)

    def test_rescale_round_trip_10k(self):
        rng = np.random.default_rng(9)
        s = CoordSpace.pixel(1024, 768)
        for _ in range(10_000):
            x = np.sort(rng.uniform(0, 1024, 2))
            y = np.sort(rng.uniform(0, 768, 2))
            b = HBox(x[0], y[0], x[1], y[1], s)
            back = rescale(rescale(b, s, NORMALIZED), NORMALIZED, s)
            assert max(abs(u - v) for u, v in zip(back.as_tuple(), b.as_tuple())) <= 1e-9

    def test_rescale_recanonicalizes(self):
        q = canonicalize_quad([(0.1, 0.5), (0.5, 0.1), (0.9, 0.5), (0.5, 0.9)])
        out = rescale(q, NORMALIZED, CoordSpace.pixel(1000, 10))
        assert out.canonical and is_canonical(out)

    def test_clamp(self):
        s = CoordSpace.pixel(10, 10)
        assert clamp_box(HBox(-1, 2, 12, 5, s)).as_tuple() == (0, 2, 10, 5)


# -- properties ---------------------------------------------------------------

coord = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def hboxes(draw):
    x0, x1 = sorted((draw(coord), draw(coord)))
    y0, y1 = sorted((draw(coord), draw(coord)))
    return HBox(x0, y0, x1, y1)


@st.composite
def convex_quads(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    return canonicalize_quad(random_convex_quad(np.random.default_rng(seed)))


@given(hboxes(), hboxes())
def test_hbb_iou_symmetric_and_bounded(a, b):
    v = hbb_iou(a, b)
    assert v == hbb_iou(b, a)
    assert 0.0 <= v <= 1.0


@given(convex_quads(), convex_quads())
@settings(max_examples=200)
def test_quad_iou_symmetric_bounded(a, b):
    v = quad_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(quad_iou(b, a), abs=1e-12)


@given(convex_quads(), convex_quads(), st.floats(0.01, 100.0))
@settings(max_examples=200)
def test_quad_iou_scale_invariant(a, b, k):
    sa = OBox(tuple((x * k, y * k) for x, y in a.vertices))
    sb = OBox(tuple((x * k, y * k) for x, y in b.vertices))
    assert quad_iou(sa, sb) == pytest.approx(quad_iou(a, b), abs=1e-9)


@given(convex_quads())
def test_self_iou_is_one(q):
    assert quad_iou(q, q) == pytest.approx(1.0, abs=1e-12)


@given(st.permutations(range(4)), convex_quads())
def test_canonical_permutation_property(perm, q):
    shuffled = [q.vertices[i] for i in perm]
    assert canonicalize_quad(shuffled) == q


def test_random_module_shuffle_matches():
    # plain-python shuffle path, independent of numpy's permutation
    pts = [(0.2, 0.1), (0.8, 0.3), (0.7, 0.9), (0.1, 0.6)]
    ref = canonicalize_quad(pts)
    r = random.Random(0)
    for _ in range(20):
        r.shuffle(pts)
        assert canonicalize_quad(pts) == ref
