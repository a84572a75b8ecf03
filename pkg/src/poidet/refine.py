"""Stage two: sampled box points, visibility, attention, pooled refinement.

A proposal's BEV rectangle is summarized by 5 + 4n sampled points: its four
corners, n evenly spaced interior points per edge, and the center. Features
read at those points are gated twice before pooling:

- hard visibility: points on the two edges facing the sensor keep their
  features, points on self-occluded edges are zeroed (a corner survives if
  either incident edge is visible; the center always survives);
- adaptive attention: a learned shared affine map plus sigmoid produces a
  scalar weight per point that multiplies its feature row.

Pooling takes a channelwise max over each edge's visible points (corners
count for both incident edges), orders the four edge vectors so that the edge
nearest the sensor lands in the first slot with the rest following clockwise,
and appends the center feature: a fixed 5C-wide vector per proposal
regardless of visibility pattern.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BBoxBEV, bev_corners, corner_distances, point_in_box
from .kernels.tensor import Tensor, concat
from .kernels import ops

EDGE_NAMES = ("top", "right", "down", "left")
CENTER_TAG = 4


def n_poi(n: int) -> int:
    return 5 + 4 * n


def poi_positions(box: BBoxBEV, n: int) -> np.ndarray:
    """Sampled point positions, shape (5 + 4n, 2), in canonical order.

    Order: corners p0..p3, then per edge (top, right, down, left) the n
    interior key-points with j ascending, then the box center last. The j-th
    key-point of the edge from corner a to corner b sits at
    a * j / (n + 1) + b * (n + 1 - j) / (n + 1), so endpoints are never
    duplicated.
    """
    if n < 0:
        raise ValueError("n must be >= 0, got %d" % n)
    corners = bev_corners(box)
    pts = [corners]
    if n:
        js = (np.arange(1, n + 1, dtype=np.float64) / (n + 1))[:, None]
        for e in range(4):
            a, b = corners[e], corners[(e + 1) % 4]
            pts.append(a * js + b * (1.0 - js))
    pts.append(np.array([[box.cx, box.cy]]))
    return np.vstack(pts)


def edge_members(n: int) -> np.ndarray:
    """Indices of each edge's points in the poi ordering, shape (4, n + 2).

    Both endpoint corners belong to an edge's member set; the shared corners
    therefore appear in two rows.
    """
    members = np.empty((4, n + 2), dtype=np.int64)
    for e in range(4):
        members[e, 0] = e
        members[e, 1] = (e + 1) % 4
        members[e, 2:] = 4 + e * n + np.arange(n)
    return members


def edge_tags(n: int) -> np.ndarray:
    """Canonical tag per point: owning edge for corners/key-points, 4 for center.

    A corner touches two edges; its canonical tag is the edge it opens
    (corner i tags edge i). Tags order the points; pooling still counts
    corners for both incident edges.
    """
    tags = np.empty(n_poi(n), dtype=np.int64)
    tags[:4] = np.arange(4)
    for e in range(4):
        tags[4 + e * n: 4 + (e + 1) * n] = e
    tags[-1] = CENTER_TAG
    return tags


def visible_edges(box: BBoxBEV, sensor) -> np.ndarray:
    """Mask of the two edges incident to the corner nearest the sensor.

    Distance ties pick the lowest corner index. A sensor inside or on the box
    boundary degenerately marks all four edges visible.
    """
    sx, sy = float(sensor[0]), float(sensor[1])
    if point_in_box(box, sx, sy):
        return np.ones(4, dtype=bool)
    dists = corner_distances(bev_corners(box), (sx, sy))
    k = int(np.argmin(dists))
    mask = np.zeros(4, dtype=bool)
    mask[k] = True            # edge k leaves corner k
    mask[(k - 1) % 4] = True  # edge k-1 arrives at corner k
    return mask


def point_visibility(box: BBoxBEV, sensor, n: int) -> np.ndarray:
    """Per-point hard visibility in {0.0, 1.0} for the poi ordering."""
    return point_visibility_from_mask(visible_edges(box, sensor), n)


def point_visibility_from_mask(edge_mask: np.ndarray, n: int) -> np.ndarray:
    vis = np.zeros(n_poi(n))
    for e in range(4):
        if edge_mask[e]:
            vis[e] = 1.0               # corner e opens edge e
            vis[(e + 1) % 4] = 1.0     # corner e+1 closes it
            vis[4 + e * n: 4 + (e + 1) * n] = 1.0
    vis[-1] = 1.0
    return vis


def apply_visibility(features: Tensor, vis: np.ndarray) -> Tensor:
    """Hard attention: multiply each feature row by its {0, 1} visibility."""
    vis = np.asarray(vis, dtype=np.float64)
    return features * vis.reshape(vis.shape + (1,) * (features.data.ndim - vis.ndim))


def adaptive_attention(features: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Learned per-point gate: weight = sigmoid(W f + b), feature = f * weight.

    features: (N, C); w: (1, C); b: (1,). Returns (gated features, weights);
    the product is differentiable through both factors.
    """
    weights = ops.linear(features, w, b).sigmoid()
    return features * weights, weights


def canonical_edge_order(box: BBoxBEV, sensor) -> np.ndarray:
    """Slot -> edge index map: nearest-midpoint edge first, then clockwise.

    Clockwise succession in the corner cycle means edge e is followed by edge
    (e + 1) % 4. Midpoint-distance ties pick the lowest edge index.
    """
    corners = bev_corners(box)
    mids = 0.5 * (corners + np.roll(corners, -1, axis=0))
    d = corner_distances(mids, sensor)
    first = int(np.argmin(d))
    return (first + np.arange(4)) % 4


def aggregate_features(features: Tensor, vis: np.ndarray, edge_order: np.ndarray,
                       n: int) -> Tensor:
    """Pool per-edge maxima into the fixed-width refinement input.

    features: (B, 5+4n, C) point features after gating; vis: (B, 5+4n) in
    {0, 1}; edge_order: (B, 4) canonical slot -> edge map. Output (B, 5C):
    four pooled edge vectors in canonical order, center feature last. An edge
    with no visible point contributes zeros; pooling considers only visible
    members, so negative feature values are never displaced by zeroed rows.
    """
    b, total, c = features.shape
    if total != n_poi(n):
        raise ValueError("feature rows %d do not match n=%d (%d points)"
                         % (total, n, n_poi(n)))
    members = edge_members(n)                     # (4, m)
    idx = members[np.asarray(edge_order)]         # (B, 4, m)
    gathered = ops.gather_points(features, idx)   # (B, 4, m, C)
    mask = np.asarray(vis, dtype=bool)[
        np.arange(b)[:, None, None], idx]         # (B, 4, m)
    m = members.shape[1]
    pooled = ops.masked_max(gathered.reshape(b * 4, m, c), mask.reshape(b * 4, m))
    center = ops.gather_points(features, np.full((b, 1), total - 1))
    return concat([pooled.reshape(b, 4 * c), center.reshape(b, c)], axis=1)


@dataclass
class PoISet:
    """Sampled points of one proposal with their gating state."""

    positions: np.ndarray          # (5+4n, 2) meters
    features: Tensor               # (5+4n, C)
    visibility: np.ndarray         # (5+4n,) in {0, 1}
    attention: np.ndarray | None   # (5+4n,) in (0, 1), None before gating
    edge_of: np.ndarray            # (5+4n,) canonical tags, 4 = center

    @property
    def n(self) -> int:
        return (len(self.positions) - 5) // 4


def build_poi_set(box: BBoxBEV, sensor, n: int, fmap: Tensor,
                  meters_to_grid, w_att: Tensor | None = None,
                  b_att: Tensor | None = None) -> PoISet:
    """Sample one proposal's points from a feature map and gate them.

    ``meters_to_grid`` maps (M, 2) BEV meters to continuous (row, col) grid
    units of ``fmap``. When the attention parameters are given the adaptive
    gate runs after the visibility gate. Intended for inspection and small
    runs; the training path batches proposals instead.
    """
    pos = poi_positions(box, n)
    feats = ops.bilinear_sample(fmap, meters_to_grid(pos))
    vis = point_visibility(box, sensor, n)
    feats = apply_visibility(feats, vis)
    attention = None
    if w_att is not None:
        feats, att = adaptive_attention(feats, w_att, b_att)
        attention = att.data.reshape(-1).copy()
    return PoISet(pos, feats, vis, attention, edge_tags(n))


def refine_head(agg: Tensor, params: dict[str, Tensor], prefix: str = "refine."
                ) -> tuple[Tensor, Tensor, Tensor]:
    """Two shared FC layers then three sibling branches.

    agg: (B, D). Returns (class logits (B, num_classes), residuals (B, 7),
    direction logits (B, 2)).
    """
    h1 = ops.linear(agg, params[prefix + "fc1_w"], params[prefix + "fc1_b"]).relu()
    h2 = ops.linear(h1, params[prefix + "fc2_w"], params[prefix + "fc2_b"]).relu()
    cls = ops.linear(h2, params[prefix + "cls_w"], params[prefix + "cls_b"])
    reg = ops.linear(h2, params[prefix + "reg_w"], params[prefix + "reg_b"])
    dirs = ops.linear(h2, params[prefix + "dir_w"], params[prefix + "dir_b"])
    return cls, reg, dirs


def rroi_align(boxes: list[BBoxBEV], fmap: Tensor, pooled: tuple[int, int],
               samples_per_bin: int, meters_to_grid) -> Tensor:
    """Rotated RoI-Align comparison pooling.

    Divides each box into pooled[0] x pooled[1] bins in the box-local frame
    (first dimension along the box length), reads ``samples_per_bin`` bilinear
    samples per bin at regular sub-centers (1 = bin center, 4 = 2x2), and
    averages them. Output (B, rows * cols * C).
    """
    rows, cols = pooled
    if rows < 1 or cols < 1:
        raise ValueError("pooled dims must be >= 1, got %r" % (pooled,))
    if samples_per_bin == 1:
        offsets = np.array([[0.5, 0.5]])
    elif samples_per_bin == 4:
        offsets = np.array([[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]])
    else:
        raise ValueError("samples_per_bin must be 1 or 4, got %d" % samples_per_bin)

    all_pts = []
    for box in boxes:
        iu, jv = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        base = np.stack([iu, jv], axis=-1).reshape(rows * cols, 1, 2)
        frac = (base + offsets[None, :, :]) / np.array([rows, cols])
        local = (frac - 0.5) * np.array([box.l, box.w])       # u along length
        c, s = math.cos(box.theta), math.sin(box.theta)
        rot = np.array([[c, -s], [s, c]])
        pts = local.reshape(-1, 2) @ rot.T + np.array([box.cx, box.cy])
        all_pts.append(pts)
    flat = np.concatenate(all_pts, axis=0)
    feats = ops.bilinear_sample(fmap, meters_to_grid(flat))
    b = len(boxes)
    cdim = feats.shape[1]
    per_bin = feats.reshape(b, rows * cols, len(offsets), cdim).mean(axis=2)
    return per_bin.reshape(b, rows * cols * cdim)
