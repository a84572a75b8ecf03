"""Rotated-box geometry: corners, clipping, IoU, NMS."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Polygon

from _oracles import brute_nms, mc_iou
from poidet.geometry import (BBox3D, BBoxBEV, TWO_PI, bev_corners,
                             corner_distances, intersection_area,
                             point_in_box, polygon_area, rotated_iou,
                             rotated_nms, wrap_angle, _clip_polygon)
from poidet.rng import Rng

finite_angle = st.floats(min_value=-50.0, max_value=50.0,
                         allow_nan=False, allow_infinity=False)


def boxes_strategy():
    return st.builds(
        BBoxBEV,
        st.floats(-20, 20), st.floats(-20, 20),
        st.floats(0.3, 6.0), st.floats(0.3, 8.0),
        st.floats(-8.0, 8.0),
    )


@given(finite_angle)
def test_wrap_angle_range(theta):
    w = wrap_angle(theta)
    assert -math.pi < w <= math.pi
    # congruent modulo 2*pi
    assert abs((w - theta) % TWO_PI) < 1e-9 or abs((w - theta) % TWO_PI - TWO_PI) < 1e-9


def test_wrap_angle_boundaries():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(0.0) == 0.0
    assert abs(wrap_angle(3 * math.pi) - math.pi) < 1e-12


def test_bev_corners_axis_aligned():
    c = bev_corners(BBoxBEV(2.0, 1.0, w=2.0, l=4.0, theta=0.0))
    # p0 back-left, p1 front-left, p2 front-right, p3 back-right (clockwise)
    assert np.allclose(c, [[0.0, 2.0], [4.0, 2.0], [4.0, 0.0], [0.0, 0.0]])


def test_bev_corners_quarter_turn():
    c = bev_corners(BBoxBEV(0.0, 0.0, w=2.0, l=4.0, theta=math.pi / 2))
    assert np.allclose(c, [[-1.0, -2.0], [-1.0, 2.0], [1.0, 2.0], [1.0, -2.0]])


@given(boxes_strategy())
def test_bev_corners_shape_and_centroid(box):
    c = bev_corners(box)
    assert c.shape == (4, 2)
    assert np.allclose(c.mean(axis=0), [box.cx, box.cy], atol=1e-9)
    assert abs(polygon_area(c) - box.w * box.l) < 1e-7 * max(1.0, box.w * box.l)


def test_polygon_area_basic():
    assert polygon_area(np.array([[0, 0], [1, 0], [1, 1], [0, 1]])) == 1.0
    assert polygon_area(np.array([[0, 0], [2, 0], [0, 2]])) == 2.0
    assert polygon_area(np.array([[0, 0], [1, 1]])) == 0.0
    assert polygon_area(np.zeros((0, 2))) == 0.0


def test_clip_polygon_matches_shapely():
    rng = Rng(4)
    for _ in range(300):
        a = BBoxBEV(rng.uniform(-2, 2), rng.uniform(-2, 2),
                    0.5 + rng.uniform(0, 3), 0.5 + rng.uniform(0, 3),
                    rng.uniform(-4, 4))
        b = BBoxBEV(rng.uniform(-2, 2), rng.uniform(-2, 2),
                    0.5 + rng.uniform(0, 3), 0.5 + rng.uniform(0, 3),
                    rng.uniform(-4, 4))
        ca, cb = bev_corners(a), bev_corners(b)
        got = polygon_area(_clip_polygon(ca, cb))
        want = Polygon(ca).intersection(Polygon(cb)).area
        assert abs(got - want) < 1e-9 * max(1.0, want)


def test_intersection_area_disjoint_and_nested():
    a = BBoxBEV(0, 0, 2, 2, 0.0)
    far = BBoxBEV(10, 0, 2, 2, 0.7)
    assert intersection_area(a, far) == 0.0
    inner = BBoxBEV(0, 0, 1, 1, 0.3)
    assert abs(intersection_area(a, inner) - 1.0) < 1e-9


def test_rotated_iou_axis_aligned_analytic():
    a = BBoxBEV(0.0, 0.0, 2.0, 4.0, 0.0)
    b = BBoxBEV(1.0, 0.5, 2.0, 4.0, 0.0)
    inter = 3.0 * 1.5
    want = inter / (8.0 + 8.0 - inter)
    assert abs(rotated_iou(a, b) - want) < 1e-12


@given(boxes_strategy(), boxes_strategy())
@settings(max_examples=300)
def test_rotated_iou_symmetric_bounded(a, b):
    v = rotated_iou(a, b)
    assert v == rotated_iou(b, a)  # bitwise, by canonical operand ordering
    assert 0.0 <= v <= 1.0 + 1e-12


@given(boxes_strategy())
def test_rotated_iou_self_is_one(box):
    assert abs(rotated_iou(box, box) - 1.0) < 1e-9


def test_rotated_iou_translation_invariance():
    a = BBoxBEV(0.3, -0.2, 1.5, 3.0, 0.4)
    b = BBoxBEV(1.1, 0.5, 2.0, 2.5, -0.9)
    v0 = rotated_iou(a, b)
    for dx, dy in [(5.0, -3.0), (-7.5, 2.25)]:
        a2 = BBoxBEV(a.cx + dx, a.cy + dy, a.w, a.l, a.theta)
        b2 = BBoxBEV(b.cx + dx, b.cy + dy, b.w, b.l, b.theta)
        assert abs(rotated_iou(a2, b2) - v0) < 1e-9


def test_rotated_iou_against_monte_carlo_sample():
    # Quick version of the acceptance oracle: 200 pairs, 2e5 samples.
    base = np.random.default_rng(77)
    us, vs = base.random(200_000), base.random(200_000)
    rng = Rng(6)
    worst = 0.0
    for _ in range(200):
        a = BBoxBEV(rng.uniform(-3, 3), rng.uniform(-3, 3),
                    0.5 + rng.uniform(0, 3), 0.5 + rng.uniform(0, 4),
                    rng.uniform(-4, 4))
        b = BBoxBEV(a.cx + rng.normal(0, 1.5), a.cy + rng.normal(0, 1.5),
                    0.5 + rng.uniform(0, 3), 0.5 + rng.uniform(0, 4),
                    rng.uniform(-4, 4))
        worst = max(worst, abs(rotated_iou(a, b) - mc_iou(a, b, us, vs)))
    assert worst < 0.01


def _random_instance(rng, n):
    boxes, scores = [], []
    for _ in range(n):
        cx, cy = rng.uniform(-10, 10), rng.uniform(-10, 10)
        boxes.append(BBoxBEV(cx, cy, 0.5 + rng.uniform(0, 3),
                             0.5 + rng.uniform(0, 4), rng.uniform(-4, 4)))
        scores.append(rng.random())
    return boxes, np.array(scores)


def test_rotated_nms_matches_brute_force():
    rng = Rng(15)
    for _ in range(100):
        boxes, scores = _random_instance(rng, 2 + rng.randint(40))
        thr = 0.2 + 0.6 * rng.random()
        assert list(rotated_nms(boxes, scores, thr, None)) == \
            brute_nms(boxes, scores, thr, None)


def test_rotated_nms_max_keep_is_prefix():
    rng = Rng(16)
    boxes, scores = _random_instance(rng, 60)
    full = list(rotated_nms(boxes, scores, 0.4, None))
    assert list(rotated_nms(boxes, scores, 0.4, 10)) == full[:10]


def test_rotated_nms_kept_pairs_below_threshold():
    rng = Rng(17)
    boxes, scores = _random_instance(rng, 50)
    keep = rotated_nms(boxes, scores, 0.35, None)
    for i, a in enumerate(keep):
        for b in keep[i + 1:]:
            assert rotated_iou(boxes[a], boxes[b]) <= 0.35


def test_rotated_nms_scores_descending_and_edge_cases():
    rng = Rng(18)
    boxes, scores = _random_instance(rng, 30)
    keep = rotated_nms(boxes, scores, 0.5, None)
    kept_scores = scores[np.array(keep)]
    assert np.all(np.diff(kept_scores) <= 0)
    assert rotated_nms([], np.zeros(0), 0.5, None) == []
    only = rotated_nms(boxes[:1], scores[:1], 0.5, None)
    assert only == [0]


def test_rotated_nms_equal_scores_stable():
    boxes = [BBoxBEV(0, 0, 2, 2, 0.0), BBoxBEV(0.1, 0, 2, 2, 0.0),
             BBoxBEV(8, 8, 2, 2, 0.0)]
    scores = np.array([0.5, 0.5, 0.5])
    assert rotated_nms(boxes, scores, 0.3, None) == [0, 2]


def test_point_in_box():
    box = BBoxBEV(2.0, 1.0, w=2.0, l=4.0, theta=0.0)
    assert point_in_box(box, 2.0, 1.0)
    assert point_in_box(box, 0.0, 0.0)  # corner counts as inside (boundary)
    assert not point_in_box(box, 4.001, 1.0)
    rot = BBoxBEV(0.0, 0.0, 2.0, 4.0, math.pi / 4)
    assert point_in_box(rot, 1.0, 1.0)
    assert not point_in_box(rot, 1.9, 0.0)


def test_corner_distances_order():
    box = BBoxBEV(10.0, 2.0, w=2.0, l=4.0, theta=0.0)
    d = corner_distances(bev_corners(box), (0.0, 0.0))
    assert np.allclose(d, [math.sqrt(73), math.sqrt(153),
                           math.sqrt(145), math.sqrt(65)])


def test_bbox3d_bev_projection():
    b3 = BBox3D(1.0, 2.0, 0.5, w=1.5, l=3.0, h=1.2, theta=0.3)
    bev = b3.bev()
    assert (bev.cx, bev.cy, bev.w, bev.l, bev.theta) == (1.0, 2.0, 1.5, 3.0, 0.3)


def test_degenerate_boxes_rejected():
    with pytest.raises(ValueError):
        BBoxBEV(0, 0, -1.0, 2.0, 0.0)
    with pytest.raises(ValueError):
        BBox3D(0, 0, 0, 1.0, 1.0, -0.5, 0.0)
