"""Stage one: dense anchors, small prediction heads, proposal generation.

Anchors tile the backbone feature grid: one anchor per cell, class size, and
orientation in {0, pi/2}, ordered row-major over cells with orientation
innermost (cell, then class, then orientation). Proposals come from decoding
the top-scoring anchors, rotated NMS at a fixed threshold, and a hard cap,
identically in training and inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BBoxBEV, BBox3D, rotated_nms
from .kernels.tensor import Tensor
from .kernels import ops
from . import targets

ORIENTATIONS = (0.0, 0.5 * math.pi)


@dataclass(frozen=True)
class AnchorSet:
    """Dense anchor grid as a (A, 7) array of (x, y, z, w, l, h, theta)."""

    boxes: np.ndarray
    n_rows: int
    n_cols: int
    n_classes: int

    def __post_init__(self):
        expected = self.n_rows * self.n_cols * self.n_classes * len(ORIENTATIONS)
        if self.boxes.shape != (expected, 7):
            raise ValueError(
                "anchor array %s does not match grid %dx%dx%d (expect (%d, 7))"
                % (self.boxes.shape, self.n_rows, self.n_cols, self.n_classes, expected))

    def __len__(self) -> int:
        return len(self.boxes)

    def as_bbox3d(self, i: int) -> BBox3D:
        x, y, z, w, l, h, theta = self.boxes[i]
        return BBox3D(x, y, z, w, l, h, theta)

    def serialize(self) -> bytes:
        return self.boxes.astype("<f8").tobytes()


@dataclass(frozen=True)
class ProposalSet:
    """NMS-filtered stage-one boxes, sorted by descending score."""

    boxes: np.ndarray          # (M, 7)
    scores: np.ndarray         # (M,)
    max_proposals: int = 300
    nms_iou: float = 0.5

    def __post_init__(self):
        if len(self.boxes) != len(self.scores):
            raise ValueError("boxes and scores differ in length")
        if len(self.boxes) > self.max_proposals:
            raise ValueError("proposal cap exceeded: %d" % len(self.boxes))
        if np.any(np.diff(self.scores) > 1e-12):
            raise ValueError("proposals must be sorted by descending score")

    def __len__(self) -> int:
        return len(self.boxes)

    def bev_boxes(self) -> list[BBoxBEV]:
        return [BBoxBEV(b[0], b[1], b[3], b[4], b[6]) for b in self.boxes]

    def bbox3d(self, i: int) -> BBox3D:
        b = self.boxes[i]
        return BBox3D(b[0], b[1], b[2], b[3], b[4], b[5], b[6])


def mean_anchor_sizes(gts_by_class: dict[int, list[tuple[float, float, float]]]
                      ) -> dict[int, tuple[float, float, float]]:
    """Arithmetic mean (w, l, h) per class over dataset ground truth."""
    out = {}
    for cls, sizes in sorted(gts_by_class.items()):
        if not sizes:
            raise ValueError("class %r has no ground-truth instances" % (cls,))
        arr = np.asarray(sizes, dtype=np.float64).reshape(-1, 3)
        out[cls] = tuple(arr.mean(axis=0))
    return out


def build_anchor_grid(x_min: float, y_min: float, cell_x: float, cell_y: float,
                      n_rows: int, n_cols: int,
                      class_sizes: list[tuple[float, float, float]],
                      z_centers: list[float]) -> AnchorSet:
    """Anchors at cell centers of the head grid.

    ``cell_x``/``cell_y`` are the metric extents of one head-grid cell
    (pillar size times the backbone stride). Ordering: row-major over
    (row, col), then class, then orientation — orientation is the innermost
    index.
    """
    if len(class_sizes) != len(z_centers):
        raise ValueError("class_sizes and z_centers differ in length")
    rows = []
    for r in range(n_rows):
        cy = y_min + (r + 0.5) * cell_y
        for c in range(n_cols):
            cx = x_min + (c + 0.5) * cell_x
            for (w, l, h), z in zip(class_sizes, z_centers):
                for theta in ORIENTATIONS:
                    rows.append((cx, cy, z, w, l, h, theta))
    boxes = np.asarray(rows, dtype=np.float64).reshape(-1, 7)
    return AnchorSet(boxes, n_rows, n_cols, len(class_sizes))


def head_forward(fmap: Tensor, w_cls: Tensor, b_cls: Tensor,
                 w_reg: Tensor, b_reg: Tensor,
                 w_dir: Tensor, b_dir: Tensor,
                 n_classes: int = 1) -> tuple[Tensor, Tensor, Tensor]:
    """1x1-convolution prediction heads over a (C, H, W) feature map.

    Returns per-anchor tensors: classification logits (A,), box residuals
    (A, 7), and direction logits (A, 2), with A = H * W * n_classes * 2 in
    anchor-grid order.
    """
    c, h, w = fmap.shape
    per_cell = n_classes * len(ORIENTATIONS)
    if w_cls.shape != (per_cell, c):
        raise ValueError("cls head expects weight (%d, %d), got %s"
                         % (per_cell, c, w_cls.shape))
    cells = fmap.reshape(c, h * w).transpose(1, 0)   # (HW, C)
    cls = ops.linear(cells, w_cls, b_cls)            # (HW, per_cell)
    reg = ops.linear(cells, w_reg, b_reg)            # (HW, per_cell * 7)
    dirs = ops.linear(cells, w_dir, b_dir)           # (HW, per_cell * 2)
    a = h * w * per_cell
    return (cls.reshape(a),
            reg.reshape(a, 7),
            dirs.reshape(a, 2))


def propose(cls_logits: np.ndarray, reg: np.ndarray, anchors: AnchorSet,
            pre_nms_top: int = 1000, nms_iou: float = 0.5,
            post_nms_top: int = 300) -> ProposalSet:
    """Decode, rank, and suppress anchors into the stage-two proposal set.

    The top ``pre_nms_top`` anchors by score are decoded against the grid,
    greedy rotated NMS runs at ``nms_iou``, and the best ``post_nms_top``
    survivors are kept. Scores are sigmoid probabilities of the logits. The
    same path serves training and inference.
    """
    cls_logits = np.asarray(cls_logits, dtype=np.float64).reshape(-1)
    reg = np.asarray(reg, dtype=np.float64).reshape(-1, 7)
    if len(cls_logits) != len(anchors) or len(reg) != len(anchors):
        raise ValueError("head outputs do not match anchor count %d" % len(anchors))
    scores = 1.0 / (1.0 + np.exp(-cls_logits))
    k = min(pre_nms_top, len(scores))
    # stable ranking: descending score with index as tiebreak
    top = np.lexsort((np.arange(len(scores)), -scores))[:k]
    decoded = targets.decode_batch(reg[top], anchors.boxes[top])
    bevs = [BBoxBEV(b[0], b[1], b[3], b[4], b[6]) for b in decoded]
    keep_local = rotated_nms(bevs, scores[top].tolist(), nms_iou, max_keep=post_nms_top)
    kept = top[keep_local]
    return ProposalSet(decoded[keep_local], scores[kept],
                       max_proposals=post_nms_top, nms_iou=nms_iou)
