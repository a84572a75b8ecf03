"""Detector assembly.

One ``Detector`` object owns the parameter set and exposes the forward pass
as separate stages (pillar features, backbone, stage-one heads, proposal
generation, second-stage pooling, refinement heads) so training, inference,
and the stage timer all drive the identical code.

Geometry conventions: the pseudo image is (C, n_rows, n_cols) with rows along
y and columns along x; the backbone downsamples by ``STRIDE`` so the head
grid cell is ``pillar_d* * STRIDE`` meters; anchors sit at head-cell centers;
second-stage sampling positions are mapped through the grid's
``meters_to_grid(points, STRIDE)`` transform. The sensor sits at the BEV
origin.
"""

from __future__ import annotations

import math

import numpy as np

from .. import refine
from ..geometry import BBoxBEV
from ..kernels import ops
from ..kernels.checkpoint import load_checkpoint, save_checkpoint
from ..kernels.tensor import Tensor, concat
from ..pillars import PillarGridSpec, decorate, pillarize
from ..rng import Rng, derive_seed
from ..rpn import AnchorSet, ORIENTATIONS, build_anchor_grid, head_forward, propose
from .config import (AblationSwitches, InferConfig, ModelConfig,
                     PipelineConfig, ProposalConfig, RROI_MODES)

STRIDE = 2
SENSOR = (0.0, 0.0)
# classification bias prior: sigmoid(bias) = 0.01 at initialization
FOCAL_BIAS = -math.log(99.0)
HEAD_INIT_STD = 0.01
CKPT_FORMAT = 1.0


class Detector:
    """Two-stage BEV detector with explicit float64 parameters."""

    def __init__(self, cfg: PipelineConfig, anchor_sizes: dict, anchor_z: dict,
                 *, seed: int = 0, params: dict | None = None):
        grid = cfg.grid
        if grid.n_rows % STRIDE or grid.n_cols % STRIDE:
            raise ValueError("grid %dx%d is not divisible by the backbone "
                             "stride %d" % (grid.n_rows, grid.n_cols, STRIDE))
        if set(anchor_sizes) != set(anchor_z):
            raise ValueError("anchor_sizes and anchor_z disagree on classes")
        if not anchor_sizes:
            raise ValueError("at least one anchor class is required")
        self.cfg = cfg
        self.grid = grid
        self.model = cfg.model
        self.switches = cfg.switches
        self.class_ids = tuple(sorted(int(c) for c in anchor_sizes))
        self.anchor_sizes = {int(c): tuple(float(v) for v in anchor_sizes[c])
                             for c in anchor_sizes}
        self.anchor_z = {int(c): float(anchor_z[c]) for c in anchor_z}
        self.head_rows = grid.n_rows // STRIDE
        self.head_cols = grid.n_cols // STRIDE

        sizes = [self.anchor_sizes[c] for c in self.class_ids]
        zs = [self.anchor_z[c] for c in self.class_ids]
        self.anchors = build_anchor_grid(
            grid.x_min, grid.y_min, grid.pillar_dx * STRIDE,
            grid.pillar_dy * STRIDE, self.head_rows, self.head_cols, sizes, zs)
        k = len(self.class_ids)
        arange = np.arange(len(self.anchors))
        self._class_anchor_idx = [
            np.nonzero((arange // len(ORIENTATIONS)) % k == j)[0]
            for j in range(k)]
        self._class_anchor_sets = [
            AnchorSet(self.anchors.boxes[idx], self.head_rows, self.head_cols, 1)
            for idx in self._class_anchor_idx]

        self.params = params if params is not None else self._init_params(seed)
        want = self.param_shapes()
        have = {name: tuple(p.shape) for name, p in self.params.items()}
        if have != want:
            raise ValueError("parameter set does not match the configuration: "
                             "%r vs %r" % (have, want))

    # ------------------------------------------------------------------
    # parameters

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def stage2_width(self) -> int:
        c = self.model.out_channels
        if self.switches.rroi != "off":
            rows, cols = self.switches.rroi_shape
            return rows * cols * c
        return 5 * c

    def param_shapes(self) -> dict:
        m = self.model
        per_cell = self.n_classes * len(ORIENTATIONS)
        shapes = {
            "pfn.w": (m.pfn_channels, 9),
            "pfn.b": (m.pfn_channels,),
            "backbone.c1_k": (m.mid_channels, m.pfn_channels, 3, 3),
            "backbone.c1_b": (m.mid_channels,),
            "backbone.c2_k": (m.mid_channels, m.mid_channels, 3, 3),
            "backbone.c2_b": (m.mid_channels,),
            "backbone.c3_k": (m.out_channels, m.mid_channels, 3, 3),
            "backbone.c3_b": (m.out_channels,),
            "backbone.c4_k": (m.out_channels, m.mid_channels + m.out_channels, 3, 3),
            "backbone.c4_b": (m.out_channels,),
            "rpn.cls_w": (per_cell, m.out_channels),
            "rpn.cls_b": (per_cell,),
            "rpn.reg_w": (per_cell * 7, m.out_channels),
            "rpn.reg_b": (per_cell * 7,),
            "rpn.dir_w": (per_cell * 2, m.out_channels),
            "rpn.dir_b": (per_cell * 2,),
        }
        if self.switches.second_stage:
            width = self.stage2_width()
            shapes.update({
                "refine.fc1_w": (m.fc_width, width),
                "refine.fc1_b": (m.fc_width,),
                "refine.fc2_w": (m.fc_width, m.fc_width),
                "refine.fc2_b": (m.fc_width,),
                "refine.cls_w": (self.n_classes, m.fc_width),
                "refine.cls_b": (self.n_classes,),
                "refine.reg_w": (7, m.fc_width),
                "refine.reg_b": (7,),
                "refine.dir_w": (2, m.fc_width),
                "refine.dir_b": (2,),
            })
            if self.switches.adaptive:
                shapes["att.w"] = (1, m.out_channels)
                shapes["att.b"] = (1,)
        return shapes

    def _init_params(self, seed: int) -> dict:
        """He init for hidden layers, 0.01-std heads, prior-biased class heads.

        Parameters are drawn in sorted-name order from one stream keyed by
        the seed, so the initial state is a pure function of (config, seed).
        """
        rng = Rng(derive_seed(seed, "init"))
        hidden = {"pfn.w", "refine.fc1_w", "refine.fc2_w"}
        params = {}
        for name, shape in sorted(self.param_shapes().items()):
            leaf = name.split(".")[-1]
            if leaf.endswith("b") and len(shape) == 1:
                data = np.zeros(shape)
                if leaf == "cls_b":
                    data[:] = FOCAL_BIAS
            elif leaf.endswith("_k"):
                std = math.sqrt(2.0 / (shape[1] * shape[2] * shape[3]))
                data = rng.normals(int(np.prod(shape)), sigma=std).reshape(shape)
            elif name in hidden:
                std = math.sqrt(2.0 / shape[1])
                data = rng.normals(int(np.prod(shape)), sigma=std).reshape(shape)
            else:
                data = rng.normals(int(np.prod(shape)),
                                   sigma=HEAD_INIT_STD).reshape(shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return params

    # ------------------------------------------------------------------
    # staged forward pass

    def meters_to_fmap(self, points: np.ndarray) -> np.ndarray:
        return self.grid.meters_to_grid(points, STRIDE)

    def pillar_features(self, cloud: np.ndarray, seed: int):
        """Cloud -> per-pillar feature columns (C, P) plus grid coords."""
        tensor = decorate(pillarize(np.asarray(cloud, dtype=np.float64),
                                    self.grid, seed), self.grid)
        d, p, n = tensor.data.shape
        flat = tensor.data.transpose(1, 2, 0).reshape(p * n, d)
        h = ops.linear(Tensor(flat), self.params["pfn.w"],
                       self.params["pfn.b"]).relu()
        pooled = ops.masked_max(h.reshape(p, n, self.model.pfn_channels),
                                tensor.valid_mask())
        return pooled.transpose(1, 0), tensor.coords

    def pseudo_image(self, feats: Tensor, coords: np.ndarray) -> Tensor:
        return ops.scatter_pillars(feats, coords,
                                   (self.grid.n_rows, self.grid.n_cols))

    def backbone(self, image: Tensor) -> Tensor:
        """Two-resolution conv trunk -> (out_channels, rows/2, cols/2)."""
        pr = self.params
        a = ops.conv2d(image, pr["backbone.c1_k"], pr["backbone.c1_b"],
                       stride=STRIDE, pad=1).relu()
        b = ops.conv2d(a, pr["backbone.c2_k"], pr["backbone.c2_b"],
                       stride=1, pad=1).relu()
        c = ops.conv2d(b, pr["backbone.c3_k"], pr["backbone.c3_b"],
                       stride=STRIDE, pad=1).relu()
        merged = concat([b, ops.upsample2x(c)], axis=0)
        return ops.conv2d(merged, pr["backbone.c4_k"], pr["backbone.c4_b"],
                          stride=1, pad=1).relu()

    def feature_map(self, cloud: np.ndarray, seed: int) -> Tensor:
        feats, coords = self.pillar_features(cloud, seed)
        return self.backbone(self.pseudo_image(feats, coords))

    def rpn_heads(self, fmap: Tensor):
        pr = self.params
        return head_forward(fmap, pr["rpn.cls_w"], pr["rpn.cls_b"],
                            pr["rpn.reg_w"], pr["rpn.reg_b"],
                            pr["rpn.dir_w"], pr["rpn.dir_b"],
                            n_classes=self.n_classes)

    def propose_per_class(self, cls_logits: np.ndarray, reg: np.ndarray):
        """Stage-one proposals, one NMS-filtered set per class."""
        p = self.cfg.proposals
        out = []
        for j, class_id in enumerate(self.class_ids):
            idx = self._class_anchor_idx[j]
            out.append((class_id, propose(
                cls_logits[idx], reg[idx], self._class_anchor_sets[j],
                pre_nms_top=p.pre_nms_top, nms_iou=p.nms_iou,
                post_nms_top=p.post_nms_top)))
        return out

    @staticmethod
    def flatten_proposals(per_class):
        """Concatenate per-class proposal sets into flat arrays.

        Returns (boxes (B, 7), class_ids (B,), scores (B,)) in class order,
        each class's boxes in descending-score order.
        """
        boxes, cids, scores = [], [], []
        for class_id, ps in per_class:
            boxes.append(ps.boxes)
            cids.append(np.full(len(ps), class_id, dtype=np.int64))
            scores.append(ps.scores)
        return (np.concatenate(boxes, axis=0),
                np.concatenate(cids), np.concatenate(scores))

    def stage2_prep(self, boxes: np.ndarray) -> dict:
        """Sampling geometry of the second stage (no tensors involved).

        For the pooled-point path: point positions, the visibility mask (all
        ones when the gate is off), and canonical edge orders. For the
        rotated-RoI path only the BEV boxes are needed.
        """
        if not self.switches.second_stage:
            raise ValueError("second stage is disabled")
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
        bevs = [BBoxBEV(b[0], b[1], b[3], b[4], b[6]) for b in boxes]
        prep = {"bevs": bevs}
        if self.switches.rroi != "off":
            return prep
        n = self.model.n_keypoints
        total = refine.n_poi(n)
        nb = len(bevs)
        positions = np.zeros((nb, total, 2))
        vis = np.ones((nb, total))
        orders = np.zeros((nb, 4), dtype=np.int64)
        for i, bev in enumerate(bevs):
            positions[i] = refine.poi_positions(bev, n)
            orders[i] = refine.canonical_edge_order(bev, SENSOR)
            if self.switches.visibility:
                vis[i] = refine.point_visibility(bev, SENSOR, n)
        prep.update(positions=positions, vis=vis, edge_orders=orders)
        return prep

    def stage2_features(self, fmap: Tensor, prep: dict) -> Tensor:
        """Pool per-proposal features -> (B, stage2_width())."""
        bevs = prep["bevs"]
        if not bevs:
            return Tensor(np.zeros((0, self.stage2_width())))
        if self.switches.rroi != "off":
            return refine.rroi_align(bevs, fmap, self.switches.rroi_shape,
                                     self.model.rroi_samples,
                                     self.meters_to_fmap)
        n = self.model.n_keypoints
        nb, total = prep["vis"].shape
        c = self.model.out_channels
        feats = ops.bilinear_sample(
            fmap, self.meters_to_fmap(prep["positions"].reshape(-1, 2)))
        feats = feats.reshape(nb, total, c)
        if self.switches.visibility:
            feats = feats * prep["vis"][:, :, None]
        if self.switches.adaptive:
            gated, _ = refine.adaptive_attention(
                feats.reshape(nb * total, c),
                self.params["att.w"], self.params["att.b"])
            feats = gated.reshape(nb, total, c)
        return refine.aggregate_features(feats, prep["vis"],
                                         prep["edge_orders"], n)

    def refine_heads(self, agg: Tensor):
        """(B, width) -> class logits (B, K), residuals (B, 7), direction (B, 2)."""
        return refine.refine_head(agg, self.params, prefix="refine.")

    # ------------------------------------------------------------------
    # persistence

    def save(self, path) -> None:
        """Self-describing checkpoint: parameters plus ``meta.*`` arrays."""
        sw = self.switches
        record = dict(self.params)
        record["meta.format_version"] = np.array([CKPT_FORMAT])
        g = self.grid
        record["meta.grid"] = np.array([
            g.x_min, g.x_max, g.y_min, g.y_max, g.pillar_dx, g.pillar_dy,
            float(g.max_points_per_pillar), float(g.max_pillars)])
        m = self.model
        record["meta.model"] = np.array([
            float(m.pfn_channels), float(m.mid_channels),
            float(m.out_channels), float(m.n_keypoints),
            float(m.fc_width), float(m.rroi_samples)])
        record["meta.switches"] = np.array([
            float(sw.second_stage), float(sw.poi_pool), float(sw.visibility),
            float(sw.adaptive), float(RROI_MODES.index(sw.rroi))])
        record["meta.class_ids"] = np.array(self.class_ids, dtype=np.float64)
        record["meta.anchor_sizes"] = np.array(
            [self.anchor_sizes[c] for c in self.class_ids])
        record["meta.anchor_z"] = np.array(
            [self.anchor_z[c] for c in self.class_ids])
        p = self.cfg.proposals
        record["meta.proposals"] = np.array([
            float(p.pre_nms_top), float(p.post_nms_top), p.nms_iou])
        inf = self.cfg.infer
        record["meta.infer"] = np.array([
            inf.score_floor, inf.final_nms_iou,
            float(inf.max_detections), float(inf.pillar_seed)])
        save_checkpoint(record, path)

    @classmethod
    def load(cls, path) -> "Detector":
        """Rebuild a detector (architecture and weights) from a checkpoint."""
        record = load_checkpoint(path)
        meta = {k: v for k, v in record.items() if k.startswith("meta.")}
        raw = {k: v for k, v in record.items() if not k.startswith("meta.")}
        version = float(meta["meta.format_version"][0])
        if version != CKPT_FORMAT:
            raise ValueError("unsupported checkpoint format %r" % version)
        gv = meta["meta.grid"]
        grid = PillarGridSpec(gv[0], gv[1], gv[2], gv[3], gv[4], gv[5],
                              int(gv[6]), int(gv[7]))
        mv = meta["meta.model"]
        model = ModelConfig(int(mv[0]), int(mv[1]), int(mv[2]), int(mv[3]),
                            int(mv[4]), int(mv[5]))
        sv = meta["meta.switches"]
        switches = AblationSwitches(bool(sv[0]), bool(sv[1]), bool(sv[2]),
                                    bool(sv[3]), RROI_MODES[int(sv[4])])
        pv = meta["meta.proposals"]
        proposals = ProposalConfig(int(pv[0]), int(pv[1]), float(pv[2]))
        iv = meta["meta.infer"]
        infer = InferConfig(float(iv[0]), float(iv[1]), int(iv[2]), int(iv[3]))
        class_ids = [int(c) for c in meta["meta.class_ids"]]
        sizes = {c: tuple(meta["meta.anchor_sizes"][j])
                 for j, c in enumerate(class_ids)}
        zs = {c: float(meta["meta.anchor_z"][j])
              for j, c in enumerate(class_ids)}
        cfg = PipelineConfig().replace(grid=grid, model=model,
                                       switches=switches, proposals=proposals,
                                       infer=infer)
        params = {name: Tensor(arr, requires_grad=True, name=name)
                  for name, arr in raw.items()}
        return cls(cfg, sizes, zs, params=params)
