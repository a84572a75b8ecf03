"""
Anatomy of the density-aware second stage
=========================================

The refinement stage re-reads the feature map at points tied to each
proposal's geometry instead of a dense RoI grid: box corners, per-edge
keypoints, and the center. Visibility zeroes the rows a LiDAR could never
have populated, a learned gate reweights the rest, and pooling is ordered
by which edge faces the sensor. This walks one proposal through every
step.
"""

import numpy as np

from poidet.pillars import PillarGridSpec
from poidet.pipeline.config import ModelConfig, PipelineConfig, ProposalConfig
from poidet.pipeline.model import Detector
from poidet.refine import (
    EDGE_NAMES,
    canonical_edge_order,
    edge_members,
    poi_positions,
    point_visibility,
    visible_edges,
)
from poidet.synth import SceneSpec, generate_scene

# --- The sampling pattern ------------------------------------------------
# n keypoints per edge gives 4 corners + 4n edge points + 1 center.
from poidet.geometry import BBoxBEV

unit = BBoxBEV(0.0, 0.0, 4.0, 8.0, 0.0)
for n in (0, 1, 2):
    pts = poi_positions(unit, n)
    print("n=%d -> %2d points of interest" % (n, len(pts)))

# At n=2 the 13 sampling points of a 4 x 8 box centered at the origin:
pts = poi_positions(unit, 2)
print("\ncorners:", np.round(pts[:4], 2).tolist())
print("edge keypoints:", np.round(pts[4:12], 2).tolist())
print("center:", pts[12].tolist())

# --- Visibility ----------------------------------------------------------
# A box broadside of a sensor shows two edges. Rows of the feature matrix
# belonging to hidden edges are zeroed outright (center always survives).
bev = BBoxBEV(10.0, 2.0, 2.0, 4.0, 0.0)
mask = visible_edges(bev, (0.0, 0.0))
print("\nvisible edges:", [EDGE_NAMES[i] for i in range(4) if mask[i]])
rows = point_visibility(bev, (0.0, 0.0), n=2)
print("row gate (13 points):", rows.astype(int).tolist())
print("zeroed rows:", int((rows == 0).sum()), "of", len(rows))

# Pooling respects occlusion-invariant ordering: edges are enumerated
# starting from the one whose midpoint is nearest the sensor, clockwise.
order = canonical_edge_order(bev, (0.0, 0.0))
print("canonical edge order:", [EDGE_NAMES[i] for i in order])
print("edge member rows:\n", edge_members(2))

# --- Through a real detector --------------------------------------------
# Build a small untrained full-mode detector and push one scene through
# stage two, printing every intermediate shape.
cfg = PipelineConfig().replace(
    grid=PillarGridSpec(0.0, 16.0, -8.0, 8.0, 0.5, 0.5, 16, 256),
    model=ModelConfig(pfn_channels=8, mid_channels=8, out_channels=8,
                      n_keypoints=2, fc_width=32, rroi_samples=4),
    proposals=ProposalConfig(pre_nms_top=64, post_nms_top=8, nms_iou=0.5),
)
det = Detector(cfg, {0: (1.9, 4.6, 1.7)}, {0: 0.85}, seed=0)
scene = generate_scene(SceneSpec(num_objects_min=3, num_objects_max=3,
                                 x_min=2.0, x_max=14.0, y_min=-6.0,
                                 y_max=6.0, density=300.0), seed=9)

fmap = det.feature_map(scene.cloud, seed=1)
print("\nbackbone feature map:", fmap.data.shape)

cls1, reg1, _ = det.rpn_heads(fmap)
per_class = det.propose_per_class(cls1.data, reg1.data)
boxes, class_ids, s1 = det.flatten_proposals(per_class)
print("proposals kept:", len(boxes))

prep = det.stage2_prep(boxes)
print("sampling positions:", prep["positions"].shape,
      "(proposals x points x (row, col))")
print("visibility gate:", prep["vis"].shape,
      "mean %.2f" % prep["vis"].mean())

agg = det.stage2_features(fmap, prep)
print("pooled second-stage features:", agg.data.shape,
      "(5 slots x %d channels)" % det.cfg.model.out_channels)

cls2, reg2, dir2 = det.refine_heads(agg)
print("refinement heads: cls %s, reg %s, dir %s"
      % (cls2.data.shape, reg2.data.shape, dir2.data.shape))

# Final scores fuse both stages: the geometric mean of the proposal score
# and the refinement probability. The heads are trained on different
# positive definitions, so their mistakes are partly independent.
p2 = 1.0 / (1.0 + np.exp(-cls2.data[:, 0]))
fused = np.sqrt(s1 * p2)
print("\nscore fusion (first 5 proposals):")
for i in range(min(5, len(boxes))):
    print("  s1 %.3f x p2 %.3f -> %.3f" % (s1[i], p2[i], fused[i]))
