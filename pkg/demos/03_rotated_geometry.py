"""
Rotated boxes: IoU, suppression, and visible edges
==================================================

Bird's-eye-view boxes rotate, so overlap means clipping one convex
quadrilateral against another, and duplicate removal needs IoU under
rotation. Visibility is pure geometry too: which edges of a box can a
sensor at the origin actually see?
"""

import numpy as np

from poidet.geometry import (
    BBoxBEV,
    bev_corners,
    intersection_area,
    rotated_iou,
    rotated_nms,
)
from poidet.refine import EDGE_NAMES, visible_edges

# Two unit-ish boxes, one axis aligned and one at 45 degrees. Their
# intersection is a rotated-square overlap no axis-aligned IoU can get.
a = BBoxBEV(0.0, 0.0, 2.0, 2.0, 0.0)
b = BBoxBEV(1.0, 0.0, 2.0, 2.0, np.pi / 4)
print("corners of b:\n", np.round(bev_corners(b), 3))
print("intersection area: %.4f" % intersection_area(a, b))
print("rotated IoU: %.4f" % rotated_iou(a, b))

# Sweep the angle: IoU is largest when aligned and dips as the square
# turns through 45 degrees.
print("\nIoU of identical centers vs rotation:")
for deg in (0, 15, 30, 45):
    c = BBoxBEV(0.0, 0.0, 2.0, 2.0, np.deg2rad(deg))
    print("  %2d deg -> %.4f" % (deg, rotated_iou(a, c)))

# NMS: greedy by score, drop anything overlapping a keeper at IoU above
# the threshold. The three near-duplicates collapse to the best one.
boxes = [
    BBoxBEV(0.0, 0.0, 2.0, 4.0, 0.1),
    BBoxBEV(0.2, 0.1, 2.0, 4.0, 0.15),   # near-duplicate of the first
    BBoxBEV(0.1, -0.1, 2.0, 4.0, 0.05),  # another near-duplicate
    BBoxBEV(8.0, 8.0, 2.0, 4.0, 1.2),    # far away, survives
]
scores = [0.9, 0.95, 0.6, 0.3]
keep = rotated_nms(boxes, scores, iou_threshold=0.5)
print("\nNMS keeps indices:", keep, "(best duplicate + the far box)")

# Visible edges: a sensor at the origin sees at most two faces of a box.
# The rule is nearest-corner based: take the corner closest to the sensor;
# its two incident edges are the visible ones (all four when inside).
sensor = (0.0, 0.0)
for box in (BBoxBEV(10.0, 0.0, 2.0, 4.0, 0.0),     # broadside ahead
            BBoxBEV(10.0, 10.0, 2.0, 4.0, 0.0),    # diagonal view
            BBoxBEV(0.0, 0.0, 2.0, 4.0, 0.0)):     # sensor inside
    mask = visible_edges(box, sensor)
    seen = [EDGE_NAMES[i] for i in range(4) if mask[i]]
    print("box at (%4.1f, %4.1f): sees %s"
          % (box.cx, box.cy, ", ".join(seen)))
