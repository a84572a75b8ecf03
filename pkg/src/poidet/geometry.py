"""Rotated-box geometry in the bird's-eye-view (BEV) plane.

Coordinate conventions used throughout the package:

- The sensor frame has x forward, y left, z up; the BEV plane is (x, y).
- A box's ``l`` (length) runs along its local x axis and ``w`` (width) along
  local y; ``theta`` rotates local axes counter-clockwise into the frame.
- Corners are ordered p0 (top-left), p1 (top-right), p2 (bottom-right),
  p3 (bottom-left) *in the unrotated box frame*, i.e. p0 = (-l/2, +w/2)
  before rotation. Edges are indexed 0..3 as top (p0-p1), right (p1-p2),
  down (p2-p3), left (p3-p0); edge i joins corner i and corner (i+1) % 4.
  Traversal p0 -> p1 -> p2 -> p3 is clockwise when x points right and y up.

All functions are pure and hold no shared mutable state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# Intersection polygons below this area (m^2) are floating-point slivers.
_AREA_EPS = 1e-12


def wrap_angle(theta: float) -> float:
    """Normalize an angle to the half-open interval (-pi, pi]."""
    t = theta % TWO_PI
    if t > math.pi:
        t -= TWO_PI
    return t


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized ``wrap_angle``."""
    t = np.asarray(theta, dtype=np.float64) % TWO_PI
    return np.where(t > math.pi, t - TWO_PI, t)


def _check_extent(name: str, value: float) -> None:
    if not (value > 0.0 and math.isfinite(value)):
        raise ValueError("%s must be positive and finite, got %r" % (name, value))


@dataclass(frozen=True)
class BBoxBEV:
    """Oriented rectangle in the BEV plane."""

    cx: float
    cy: float
    w: float
    l: float
    theta: float

    def __post_init__(self):
        _check_extent("w", self.w)
        _check_extent("l", self.l)
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def area(self) -> float:
        return self.w * self.l

    @property
    def circumradius(self) -> float:
        """Radius of the smallest origin-centered circle covering the box."""
        return 0.5 * math.hypot(self.w, self.l)


@dataclass(frozen=True)
class BBox3D:
    """7-parameter oriented box: center (x, y, z), size (w, l, h), heading."""

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float

    def __post_init__(self):
        _check_extent("w", self.w)
        _check_extent("l", self.l)
        _check_extent("h", self.h)
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def bev(self) -> BBoxBEV:
        """Project to the BEV plane, dropping z and h."""
        return BBoxBEV(self.x, self.y, self.w, self.l, self.theta)


def bev_corners(box: BBoxBEV) -> np.ndarray:
    """Corner positions, shape (4, 2), ordered p0..p3 as documented above."""
    hl, hw = 0.5 * box.l, 0.5 * box.w
    local = np.array(
        [[-hl, hw], [hl, hw], [hl, -hw], [-hl, -hw]], dtype=np.float64
    )
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.cx, box.cy])


def corner_distances(corners: np.ndarray, sensor: Sequence[float]) -> np.ndarray:
    """Euclidean distance of each corner to the sensor, in corner order."""
    d = np.asarray(corners, dtype=np.float64) - np.asarray(sensor, dtype=np.float64)
    return np.hypot(d[:, 0], d[:, 1])


def _shoelace(points: list) -> float:
    """Unsigned area of a vertex list of (x, y) tuples, accumulated in order."""
    n = len(points)
    if n < 3:
        return 0.0
    acc = 0.0
    px, py = points[-1]
    for cx, cy in points:
        acc += px * cy - py * cx
        px, py = cx, cy
    return 0.5 * abs(acc)


def _clip_pure(subject: list, clip: list) -> list:
    """Sutherland-Hodgman clip of ``subject`` by convex ``clip`` (clockwise).

    Both polygons are lists of (x, y) float tuples. Kept in plain Python
    floats: this sits on the NMS hot path, where array round-trips would
    dominate the arithmetic.
    """
    output = subject
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        # For clockwise winding, inside means cross(edge, p - a) <= 0.
        px, py = inp[-1]
        prev_in = ex * (py - ay) - ey * (px - ax) <= 0.0
        for cur in inp:
            cx, cy = cur
            cur_in = ex * (cy - ay) - ey * (cx - ax) <= 0.0
            if cur_in != prev_in:
                dx, dy = cx - px, cy - py
                denom = ex * dy - ey * dx
                if denom != 0.0:
                    t = (ex * (ay - py) - ey * (ax - px)) / denom
                    output.append((px + t * dx, py + t * dy))
            if cur_in:
                output.append(cur)
            px, py, prev_in = cx, cy, cur_in
    return output


def _corners_pure(box: BBoxBEV) -> list:
    """``bev_corners`` as a list of tuples, computed in scalar math."""
    hl, hw = 0.5 * box.l, 0.5 * box.w
    c, s = math.cos(box.theta), math.sin(box.theta)
    cx, cy = box.cx, box.cy
    return [
        (cx + (-hl) * c - hw * s, cy + (-hl) * s + hw * c),
        (cx + hl * c - hw * s, cy + hl * s + hw * c),
        (cx + hl * c + hw * s, cy + hl * s - hw * c),
        (cx + (-hl) * c + hw * s, cy + (-hl) * s - hw * c),
    ]


def polygon_area(poly: np.ndarray) -> float:
    """Unsigned area of a simple polygon by the shoelace formula."""
    return _shoelace([(float(p[0]), float(p[1])) for p in np.asarray(poly)])


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Array-in/array-out wrapper of the polygon clip."""
    out = _clip_pure([(float(x), float(y)) for x, y in np.asarray(subject)],
                     [(float(x), float(y)) for x, y in np.asarray(clip)])
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def intersection_area(a: BBoxBEV, b: BBoxBEV) -> float:
    """Overlap area of two oriented rectangles."""
    area = _shoelace(_clip_pure(_corners_pure(a), _corners_pure(b)))
    return 0.0 if area < _AREA_EPS else area


def _box_sort_key(box: BBoxBEV):
    return (box.cx, box.cy, box.w, box.l, box.theta)


def rotated_iou(a: BBoxBEV, b: BBoxBEV) -> float:
    """Intersection over union of two oriented BEV rectangles.

    Exactly symmetric: the operand pair is put in a canonical order before
    clipping, so rotated_iou(a, b) and rotated_iou(b, a) run the identical
    float computation.
    """
    dx, dy = a.cx - b.cx, a.cy - b.cy
    reach = a.circumradius + b.circumradius
    if dx * dx + dy * dy > reach * reach:
        return 0.0
    if _box_sort_key(b) < _box_sort_key(a):
        a, b = b, a
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def rotated_nms(
    boxes: Sequence[BBoxBEV],
    scores: Sequence[float],
    iou_threshold: float,
    max_keep: int | None = None,
) -> list[int]:
    """Greedy non-maximum suppression on rotated boxes.

    Boxes are visited in descending score order (ties broken by lower index);
    a box is suppressed when its IoU with an already-kept box exceeds
    ``iou_threshold``. Returns kept indices in descending-score order.
    """
    n = len(boxes)
    if n != len(scores):
        raise ValueError("boxes and scores differ in length: %d vs %d" % (n, len(scores)))
    for i, s in enumerate(scores):
        if not math.isfinite(s):
            raise ValueError("score %d is not finite: %r" % (i, s))
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    arr = np.array([[b.cx, b.cy, b.w, b.l, b.theta] for b in boxes],
                   dtype=np.float64).reshape(n, 5)
    cx, cy, w, l, theta = arr.T
    radii = 0.5 * np.hypot(w, l)
    # Exact axis-aligned half-extents of each rotated rectangle.
    cos_t, sin_t = np.abs(np.cos(theta)), np.abs(np.sin(theta))
    hx = 0.5 * (cos_t * l + sin_t * w)
    hy = 0.5 * (sin_t * l + cos_t * w)
    areas = w * l
    keep: list[int] = []
    suppressed = np.zeros(n, dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        # Candidate filter: the intersection cannot exceed the overlap of the
        # axis-aligned covers (nor the smaller box), so an upper bound on IoU
        # follows. Inflating it by 1e-9 relative before the threshold test
        # keeps the filter strictly conservative against float rounding
        # (errors inside rotated_iou are around 1e-13 relative), so the kept
        # set is identical to testing every pair exactly.
        near = (cx - cx[i]) ** 2 + (cy - cy[i]) ** 2 <= (radii + radii[i]) ** 2
        ox = np.minimum(cx + hx, cx[i] + hx[i]) - np.maximum(cx - hx, cx[i] - hx[i])
        oy = np.minimum(cy + hy, cy[i] + hy[i]) - np.maximum(cy - hy, cy[i] - hy[i])
        inter_ub = np.minimum(np.maximum(ox, 0.0) * np.maximum(oy, 0.0),
                              np.minimum(areas, areas[i]))
        iou_ub = inter_ub / (areas + areas[i] - inter_ub)
        cand = near & ~suppressed & (iou_ub * (1.0 + 1e-9) + 1e-12 > iou_threshold)
        cand[i] = False
        for j in np.nonzero(cand)[0]:
            if rotated_iou(boxes[i], boxes[j]) > iou_threshold:
                suppressed[j] = True
    return keep


def point_in_box(box: BBoxBEV, px: float, py: float, margin: float = 0.0) -> bool:
    """Closed-boundary point-in-rectangle test, optionally shrunk by margin."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = px - box.cx, py - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return abs(u) <= 0.5 * box.l - margin and abs(v) <= 0.5 * box.w - margin


def segment_crosses_interior(
    p: Sequence[float], q: Sequence[float], box: BBoxBEV, shrink: float = 1e-9
) -> bool:
    """True when the open segment p-q passes through the box interior.

    The box is shrunk by ``shrink`` so that grazing contact along an edge or
    corner does not count as a crossing. Uses Liang-Barsky clipping in the
    box-local frame.
    """
    c, s = math.cos(box.theta), math.sin(box.theta)
    hx = 0.5 * box.l - shrink
    hy = 0.5 * box.w - shrink
    if hx <= 0.0 or hy <= 0.0:
        return False
    # Segment endpoints in box-local coordinates.
    px, py = p[0] - box.cx, p[1] - box.cy
    qx, qy = q[0] - box.cx, q[1] - box.cy
    x0, y0 = c * px + s * py, -s * px + c * py
    x1, y1 = c * qx + s * qy, -s * qx + c * qy
    dx, dy = x1 - x0, y1 - y0
    t0, t1 = 0.0, 1.0
    for pval, qval in (
        (-dx, x0 + hx),
        (dx, hx - x0),
        (-dy, y0 + hy),
        (dy, hy - y0),
    ):
        if pval == 0.0:
            if qval < 0.0:
                return False
        else:
            r = qval / pval
            if pval < 0.0:
                if r > t1:
                    return False
                if r > t0:
                    t0 = r
            else:
                if r < t0:
                    return False
                if r < t1:
                    t1 = r
    return (t1 - t0) > 1e-12


def segment_crosses_any(
    p: np.ndarray, q: np.ndarray, box: BBoxBEV, shrink: float = 1e-9
) -> np.ndarray:
    """Vectorized ``segment_crosses_interior`` for segments p[i]-q[i].

    p, q: arrays of shape (M, 2). Returns a boolean mask of shape (M,).
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 2)
    c, s = math.cos(box.theta), math.sin(box.theta)
    hx = 0.5 * box.l - shrink
    hy = 0.5 * box.w - shrink
    if hx <= 0.0 or hy <= 0.0:
        return np.zeros(len(p), dtype=bool)
    rot = np.array([[c, s], [-s, c]])
    lp = (p - [box.cx, box.cy]) @ rot.T
    lq = (q - [box.cx, box.cy]) @ rot.T
    d = lq - lp
    t0 = np.zeros(len(p))
    t1 = np.ones(len(p))
    alive = np.ones(len(p), dtype=bool)
    for pval, qval in (
        (-d[:, 0], lp[:, 0] + hx),
        (d[:, 0], hx - lp[:, 0]),
        (-d[:, 1], lp[:, 1] + hy),
        (d[:, 1], hy - lp[:, 1]),
    ):
        parallel = pval == 0.0
        alive &= ~(parallel & (qval < 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(parallel, 0.0, qval / np.where(parallel, 1.0, pval))
        neg = (pval < 0.0) & alive
        pos = (pval > 0.0) & alive
        alive &= ~(neg & (r > t1)) & ~(pos & (r < t0))
        t0 = np.where(neg & (r > t0), r, t0)
        t1 = np.where(pos & (r < t1), r, t1)
    return alive & ((t1 - t0) > 1e-12)
