"""Second-stage point sampling, visibility gating, and pooled aggregation."""

import math

import numpy as np
import pytest

from poidet.geometry import BBoxBEV, bev_corners
from poidet.kernels import ops
from poidet.kernels.tensor import Tensor
from poidet.refine import (
    CENTER_TAG,
    PoISet,
    adaptive_attention,
    aggregate_features,
    apply_visibility,
    build_poi_set,
    canonical_edge_order,
    edge_members,
    edge_tags,
    n_poi,
    point_visibility,
    point_visibility_from_mask,
    poi_positions,
    refine_head,
    rroi_align,
    visible_edges,
)
from poidet.rng import Rng

from _oracles import halfplanes_outside, ray_visible_edges


def _random_box(rng: Rng) -> BBoxBEV:
    return BBoxBEV(
        cx=rng.uniform(-20.0, 20.0),
        cy=rng.uniform(-20.0, 20.0),
        w=rng.uniform(0.5, 4.0),
        l=rng.uniform(0.5, 8.0),
        theta=rng.uniform(-math.pi, math.pi),
    )


def _segment_distance(p, a, b) -> float:
    ab = b - a
    t = float(np.dot(p - a, ab) / np.dot(ab, ab))
    t = min(1.0, max(0.0, t))
    return float(np.linalg.norm(p - (a + t * ab)))


class TestPoiPositions:
    def test_counts(self):
        box = BBoxBEV(0.0, 0.0, 2.0, 4.0, 0.3)
        for n in range(9):
            assert len(poi_positions(box, n)) == n_poi(n) == 5 + 4 * n
        assert len(poi_positions(box, 2)) == 13

    def test_n0_is_corners_plus_center(self):
        box = BBoxBEV(3.0, -1.0, 2.0, 5.0, 0.7)
        pts = poi_positions(box, 0)
        np.testing.assert_allclose(pts[:4], bev_corners(box), atol=1e-12)
        np.testing.assert_allclose(pts[4], [box.cx, box.cy], atol=1e-12)

    def test_keypoint_formula_all_n(self):
        rng = Rng(11)
        for n in range(9):
            box = _random_box(rng)
            pts = poi_positions(box, n)
            corners = bev_corners(box)
            for e in range(4):
                a, b = corners[e], corners[(e + 1) % 4]
                for j in range(1, n + 1):
                    expected = a * (j / (n + 1)) + b * ((n + 1 - j) / (n + 1))
                    got = pts[4 + e * n + (j - 1)]
                    np.testing.assert_allclose(got, expected, atol=1e-9)

    def test_n1_unit_box_midpoints(self):
        box = BBoxBEV(0.0, 0.0, 1.0, 1.0, 0.0)
        pts = poi_positions(box, 1)
        corners = bev_corners(box)
        for e in range(4):
            mid = 0.5 * (corners[e] + corners[(e + 1) % 4])
            np.testing.assert_allclose(pts[4 + e], mid, atol=1e-12)

    def test_keypoints_lie_on_edges_center_exact(self):
        rng = Rng(12)
        for _ in range(25):
            box = _random_box(rng)
            n = rng.randint(9)
            pts = poi_positions(box, n)
            corners = bev_corners(box)
            np.testing.assert_allclose(pts[-1], [box.cx, box.cy], atol=1e-12)
            for e in range(4):
                a, b = corners[e], corners[(e + 1) % 4]
                for j in range(n):
                    assert _segment_distance(pts[4 + e * n + j], a, b) < 1e-9

    def test_negative_n_raises(self):
        with pytest.raises(ValueError):
            poi_positions(BBoxBEV(0, 0, 1, 1, 0), -1)


class TestEdgeIndexing:
    def test_members_layout(self):
        m = edge_members(2)
        assert m.shape == (4, 4)
        np.testing.assert_array_equal(m[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(m[1], [1, 2, 6, 7])
        np.testing.assert_array_equal(m[2], [2, 3, 8, 9])
        np.testing.assert_array_equal(m[3], [3, 0, 10, 11])

    def test_corners_shared_between_edges(self):
        m = edge_members(3)
        for corner in range(4):
            owners = [e for e in range(4) if corner in m[e, :2]]
            assert owners == sorted({corner, (corner - 1) % 4})

    def test_tags(self):
        t = edge_tags(2)
        np.testing.assert_array_equal(t[:4], [0, 1, 2, 3])
        np.testing.assert_array_equal(t[4:6], [0, 0])
        np.testing.assert_array_equal(t[10:12], [3, 3])
        assert t[-1] == CENTER_TAG


class TestVisibleEdges:
    def test_known_example(self):
        box = BBoxBEV(10.0, 2.0, 2.0, 4.0, 0.0)
        mask = visible_edges(box, (0.0, 0.0))
        np.testing.assert_array_equal(mask, [False, False, True, True])

    def test_sensor_inside_all_visible(self):
        box = BBoxBEV(5.0, 5.0, 2.0, 4.0, 0.4)
        np.testing.assert_array_equal(visible_edges(box, (5.0, 5.0)), [True] * 4)

    def test_tie_lowest_corner_index(self):
        box = BBoxBEV(10.0, 0.0, 2.0, 4.0, 0.0)
        mask = visible_edges(box, (0.0, 0.0))
        np.testing.assert_array_equal(mask, [True, False, False, True])

    def test_exactly_two_outside(self):
        rng = Rng(13)
        for _ in range(200):
            box = _random_box(rng)
            sensor = (rng.uniform(-40.0, 40.0), rng.uniform(-40.0, 40.0))
            if not visible_edges(box, sensor).all():
                assert visible_edges(box, sensor).sum() == 2

    def test_ray_oracle_soundness_and_face_case(self):
        rng = Rng(14)
        checked = 0
        for _ in range(300):
            box = _random_box(rng)
            sensor = (rng.uniform(-40.0, 40.0), rng.uniform(-40.0, 40.0))
            outside = halfplanes_outside(box, sensor)
            if outside.sum() == 0:
                continue
            algo = visible_edges(box, sensor)
            oracle = ray_visible_edges(box, sensor)
            assert not (oracle & ~algo).any()
            if outside.sum() == 2:
                np.testing.assert_array_equal(algo, oracle)
            elif outside.sum() == 1:
                facing = int(np.argmax(outside))
                assert oracle.sum() == 1 and oracle[facing]
                assert algo[facing] and algo.sum() == 2
            checked += 1
        assert checked > 200


class TestPointVisibility:
    def test_row_enumeration_two_invisible(self):
        mask = np.array([False, False, True, True])
        vis = point_visibility_from_mask(mask, 2)
        expected = np.zeros(13)
        expected[[0, 2, 3, 8, 9, 10, 11, 12]] = 1.0
        np.testing.assert_array_equal(vis, expected)
        assert int((vis == 0).sum()) == 5

    def test_all_visible(self):
        vis = point_visibility_from_mask(np.ones(4, dtype=bool), 3)
        np.testing.assert_array_equal(vis, np.ones(n_poi(3)))

    def test_center_always_visible(self):
        vis = point_visibility_from_mask(np.zeros(4, dtype=bool), 2)
        assert vis[-1] == 1.0 and vis[:-1].sum() == 0

    def test_corner_survives_one_incident_edge(self):
        mask = np.array([True, False, False, False])
        vis = point_visibility_from_mask(mask, 1)
        assert vis[0] == 1.0 and vis[1] == 1.0
        assert vis[2] == 0.0 and vis[3] == 0.0

    def test_matches_composed_helper(self):
        box = BBoxBEV(10.0, 2.0, 2.0, 4.0, 0.0)
        composed = point_visibility(box, (0.0, 0.0), 2)
        direct = point_visibility_from_mask(visible_edges(box, (0.0, 0.0)), 2)
        np.testing.assert_array_equal(composed, direct)


class TestApplyVisibility:
    def test_zeroes_exactly_masked_rows(self):
        rng = np.random.default_rng(0)
        feats = Tensor(rng.normal(size=(13, 6)))
        vis = point_visibility_from_mask(np.array([False, False, True, True]), 2)
        out = apply_visibility(feats, vis)
        for i in range(13):
            if vis[i]:
                np.testing.assert_array_equal(out.data[i], feats.data[i])
            else:
                np.testing.assert_array_equal(out.data[i], 0.0)

    def test_idempotent(self):
        feats = Tensor(np.arange(26.0).reshape(13, 2))
        vis = point_visibility_from_mask(np.array([True, False, False, True]), 2)
        once = apply_visibility(feats, vis)
        twice = apply_visibility(once, vis)
        np.testing.assert_array_equal(once.data, twice.data)

    def test_all_visible_unchanged(self):
        feats = Tensor(np.arange(10.0).reshape(5, 2))
        out = apply_visibility(feats, np.ones(5))
        np.testing.assert_array_equal(out.data, feats.data)

    def test_gradient_blocked_on_invisible_rows(self):
        feats = Tensor(np.ones((5, 3)), requires_grad=True)
        vis = np.array([1.0, 0.0, 1.0, 0.0, 1.0])
        apply_visibility(feats, vis).sum().backward()
        np.testing.assert_array_equal(feats.grad, vis[:, None] * np.ones((5, 3)))


class TestAdaptiveAttention:
    def test_zero_params_halve_features(self):
        feats = Tensor(np.arange(12.0).reshape(4, 3))
        w = Tensor(np.zeros((1, 3)))
        b = Tensor(np.zeros(1))
        gated, weights = adaptive_attention(feats, w, b)
        np.testing.assert_allclose(weights.data, 0.5)
        np.testing.assert_allclose(gated.data, 0.5 * feats.data)

    def test_weights_match_formula(self):
        rng = np.random.default_rng(1)
        feats = Tensor(rng.normal(size=(6, 4)))
        w = Tensor(rng.normal(size=(1, 4)))
        b = Tensor(rng.normal(size=(1,)))
        gated, weights = adaptive_attention(feats, w, b)
        expected = 1.0 / (1.0 + np.exp(-(feats.data @ w.data.T + b.data)))
        np.testing.assert_allclose(weights.data, expected, atol=1e-12)
        np.testing.assert_allclose(gated.data, feats.data * expected, atol=1e-12)

    def test_zero_row_stays_zero(self):
        feats = Tensor(np.zeros((1, 4)))
        gated, weights = adaptive_attention(feats, Tensor(np.ones((1, 4))),
                                            Tensor(np.array([2.0])))
        assert weights.data[0, 0] == pytest.approx(1.0 / (1.0 + math.exp(-2.0)))
        np.testing.assert_array_equal(gated.data, 0.0)


class TestCanonicalEdgeOrder:
    def test_nearest_edge_first_clockwise(self):
        box = BBoxBEV(10.0, 0.0, 2.0, 4.0, 0.0)
        np.testing.assert_array_equal(canonical_edge_order(box, (0.0, 0.0)),
                                      [3, 0, 1, 2])
        np.testing.assert_array_equal(canonical_edge_order(box, (30.0, 0.0)),
                                      [1, 2, 3, 0])

    def test_tie_picks_lowest_index(self):
        box = BBoxBEV(0.0, 0.0, 2.0, 2.0, 0.0)
        np.testing.assert_array_equal(canonical_edge_order(box, (0.0, 0.0)),
                                      [0, 1, 2, 3])

    def test_rotation_invariance(self):
        box = BBoxBEV(6.0, 2.0, 1.5, 3.0, 0.3)
        order = canonical_edge_order(box, (0.0, 0.0))
        rot = BBoxBEV(-box.cy, box.cx, box.w, box.l, box.theta + math.pi / 2)
        np.testing.assert_array_equal(canonical_edge_order(rot, (0.0, 0.0)), order)


class TestAggregateFeatures:
    def _setup(self, n=2, c=3):
        total = n_poi(n)
        feats = np.zeros((1, total, c))
        return feats, np.ones((1, total)), np.arange(4)[None, :]

    def test_fixed_width(self):
        for n in (0, 1, 2):
            feats, vis, order = self._setup(n=n, c=5)
            out = aggregate_features(Tensor(feats), vis, order, n)
            assert out.shape == (1, 25)

    def test_keypoint_routes_to_single_edge(self):
        feats, vis, order = self._setup()
        feats[0, 8, 1] = 7.0  # first key-point of edge 2
        out = aggregate_features(Tensor(feats), vis, order, 2).data.reshape(5, 3)
        assert out[2, 1] == 7.0
        assert out[[0, 1, 3, 4]].sum() == 0.0

    def test_corner_pools_into_both_edges(self):
        feats, vis, order = self._setup()
        feats[0, 1, 0] = 3.0  # corner 1 joins edges 0 and 1
        out = aggregate_features(Tensor(feats), vis, order, 2).data.reshape(5, 3)
        assert out[0, 0] == 3.0 and out[1, 0] == 3.0
        assert out[[2, 3, 4]].sum() == 0.0

    def test_invisible_edge_zero_slot(self):
        # Only edge 2 visible: edge 0 shares no visible corner and pools empty.
        feats, vis, order = self._setup()
        feats[0] = 1.0
        vis = point_visibility_from_mask(
            np.array([False, False, True, False]), 2)[None, :]
        feats[0, ~vis[0].astype(bool)] = 0.0
        out = aggregate_features(Tensor(feats), vis, order, 2).data.reshape(5, 3)
        np.testing.assert_array_equal(out[0], 0.0)
        np.testing.assert_array_equal(out[1], 1.0)  # shares visible corner 2
        np.testing.assert_array_equal(out[2], 1.0)
        np.testing.assert_array_equal(out[3], 1.0)  # shares visible corner 3
        np.testing.assert_array_equal(out[4], 1.0)

    def test_adjacent_visible_pair_leaves_no_empty_slot(self):
        # The nearest-corner rule always marks two adjacent edges, so every
        # edge keeps at least one visible corner member.
        feats, _, order = self._setup()
        feats[0] = 1.0
        vis = point_visibility_from_mask(
            np.array([False, False, True, True]), 2)[None, :]
        feats[0, ~vis[0].astype(bool)] = 0.0
        out = aggregate_features(Tensor(feats), vis, order, 2).data.reshape(5, 3)
        np.testing.assert_array_equal(out, 1.0)

    def test_negative_values_not_displaced(self):
        feats, vis, order = self._setup()
        feats[0] = -2.0
        out = aggregate_features(Tensor(feats), vis, order, 2).data
        np.testing.assert_array_equal(out, -2.0)

    def test_canonical_order_permutes_slots(self):
        feats, vis, _ = self._setup()
        feats[0, 8, 0] = 5.0  # key-point of edge 2
        rolled = np.array([[2, 3, 0, 1]])
        out = aggregate_features(Tensor(feats), vis, rolled, 2).data.reshape(5, 3)
        assert out[0, 0] == 5.0

    def test_center_slot(self):
        feats, vis, order = self._setup()
        feats[0, -1] = [1.0, 2.0, 3.0]
        out = aggregate_features(Tensor(feats), vis, order, 2).data.reshape(5, 3)
        np.testing.assert_array_equal(out[4], [1.0, 2.0, 3.0])

    def test_row_mismatch_raises(self):
        with pytest.raises(ValueError):
            aggregate_features(Tensor(np.zeros((1, 9, 3))), np.ones((1, 9)),
                               np.arange(4)[None, :], 2)


class TestBuildPoiSet:
    def _fmap(self, c=4, h=32, w=32, fill=2.0):
        return Tensor(np.full((c, h, w), fill))

    @staticmethod
    def _m2g(pts):
        return np.stack([pts[:, 1], pts[:, 0]], axis=1)

    def test_constant_map_visible_rows(self):
        box = BBoxBEV(20.0, 12.0, 2.0, 4.0, 0.0)
        pois = build_poi_set(box, (0.0, 0.0), 2, self._fmap(), self._m2g)
        assert isinstance(pois, PoISet) and pois.n == 2
        assert pois.attention is None
        np.testing.assert_array_equal(pois.edge_of, edge_tags(2))
        for i in range(13):
            expected = 2.0 if pois.visibility[i] else 0.0
            np.testing.assert_array_equal(pois.features.data[i], expected)

    def test_attention_applied_after_visibility(self):
        box = BBoxBEV(20.0, 12.0, 2.0, 4.0, 0.0)
        w = Tensor(np.zeros((1, 4)))
        b = Tensor(np.zeros(1))
        pois = build_poi_set(box, (0.0, 0.0), 2, self._fmap(), self._m2g,
                             w_att=w, b_att=b)
        np.testing.assert_allclose(pois.attention, 0.5)
        for i in range(13):
            expected = 1.0 if pois.visibility[i] else 0.0
            np.testing.assert_allclose(pois.features.data[i], expected)


class TestRefineHead:
    def test_branch_widths_and_zero_params(self):
        c = 10
        params = {
            "refine.fc1_w": Tensor(np.zeros((8, c))),
            "refine.fc1_b": Tensor(np.zeros(8)),
            "refine.fc2_w": Tensor(np.zeros((8, 8))),
            "refine.fc2_b": Tensor(np.zeros(8)),
            "refine.cls_w": Tensor(np.zeros((2, 8))),
            "refine.cls_b": Tensor(np.zeros(2)),
            "refine.reg_w": Tensor(np.zeros((7, 8))),
            "refine.reg_b": Tensor(np.zeros(7)),
            "refine.dir_w": Tensor(np.zeros((2, 8))),
            "refine.dir_b": Tensor(np.zeros(2)),
        }
        cls, reg, dirs = refine_head(Tensor(np.ones((3, c))), params)
        assert cls.shape == (3, 2) and reg.shape == (3, 7) and dirs.shape == (3, 2)
        np.testing.assert_array_equal(cls.data, 0.0)
        np.testing.assert_array_equal(reg.data, 0.0)


class TestRRoIAlign:
    @staticmethod
    def _m2g(pts):
        return np.stack([pts[:, 1], pts[:, 0]], axis=1)

    def test_constant_map(self):
        fmap = Tensor(np.full((3, 24, 24), 4.5))
        boxes = [BBoxBEV(10.0, 10.0, 2.0, 4.0, 0.7),
                 BBoxBEV(12.0, 8.0, 1.0, 3.0, -0.2)]
        for pooled in ((4, 4), (8, 4)):
            for spb in (1, 4):
                out = rroi_align(boxes, fmap, pooled, spb, self._m2g)
                assert out.shape == (2, pooled[0] * pooled[1] * 3)
                np.testing.assert_allclose(out.data, 4.5, atol=1e-12)

    def test_single_sample_equals_bilinear_at_bin_centers(self):
        rng = np.random.default_rng(2)
        fmap = Tensor(rng.normal(size=(2, 16, 16)))
        box = BBoxBEV(8.0, 8.0, 4.0, 8.0, 0.0)
        out = rroi_align([box], fmap, (4, 2), 1, self._m2g)
        rows, cols = 4, 2
        centers = []
        for i in range(rows):
            for j in range(cols):
                u = (i + 0.5) / rows - 0.5
                v = (j + 0.5) / cols - 0.5
                centers.append([box.cx + u * box.l, box.cy + v * box.w])
        direct = ops.bilinear_sample(fmap, self._m2g(np.array(centers)))
        np.testing.assert_allclose(out.data.reshape(rows * cols, 2),
                                   direct.data, atol=1e-12)

    def test_bad_args_raise(self):
        fmap = Tensor(np.zeros((1, 8, 8)))
        box = [BBoxBEV(4.0, 4.0, 1.0, 2.0, 0.0)]
        with pytest.raises(ValueError):
            rroi_align(box, fmap, (0, 4), 1, self._m2g)
        with pytest.raises(ValueError):
            rroi_align(box, fmap, (4, 4), 2, self._m2g)
