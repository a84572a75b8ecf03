"""Box residual encoding, anchor/proposal target assignment, and losses.

The residual between a target box and a reference ("anchor") box is the
7-vector (dx, dy, dz, dw, dl, dh, dtheta): center offsets normalized by the
anchor's BEV diagonal (dz by anchor height), log size ratios, and the raw
wrapped heading difference. The same encoding serves both stages; the second
stage treats each proposal as the anchor of its own refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BBox3D, rotated_iou, wrap_angle, wrap_angles
from .kernels.tensor import Tensor
from .kernels import ops

NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class AssignmentConfig:
    """IoU bands for positive/negative labels; in between is ignored."""

    pos_iou: float
    neg_iou: float

    def __post_init__(self):
        if not 0.0 <= self.neg_iou <= self.pos_iou <= 1.0:
            raise ValueError(
                "need 0 <= neg_iou <= pos_iou <= 1, got (%r, %r)"
                % (self.pos_iou, self.neg_iou))


@dataclass(frozen=True)
class LossWeights:
    beta_cls: float = 1.0
    beta_reg: float = 2.0
    beta_dir: float = 0.2

    def __post_init__(self):
        if min(self.beta_cls, self.beta_reg, self.beta_dir) < 0:
            raise ValueError("loss weights must be non-negative")


def encode(gt: BBox3D, anchor: BBox3D) -> np.ndarray:
    """Residual 7-vector from anchor to ground truth."""
    d = math.hypot(anchor.w, anchor.l)
    return np.array([
        (gt.x - anchor.x) / d,
        (gt.y - anchor.y) / d,
        (gt.z - anchor.z) / anchor.h,
        math.log(gt.w / anchor.w),
        math.log(gt.l / anchor.l),
        math.log(gt.h / anchor.h),
        wrap_angle(gt.theta - anchor.theta),
    ])


def decode(residual: np.ndarray, anchor: BBox3D) -> BBox3D:
    """Exact algebraic inverse of ``encode``."""
    d = math.hypot(anchor.w, anchor.l)
    r = np.asarray(residual, dtype=np.float64).reshape(7)
    return BBox3D(
        x=anchor.x + r[0] * d,
        y=anchor.y + r[1] * d,
        z=anchor.z + r[2] * anchor.h,
        w=anchor.w * math.exp(r[3]),
        l=anchor.l * math.exp(r[4]),
        h=anchor.h * math.exp(r[5]),
        theta=wrap_angle(anchor.theta + r[6]),
    )


def encode_batch(gts: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized ``encode`` on (N, 7) arrays of (x, y, z, w, l, h, theta)."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    d = np.hypot(anchors[:, 3], anchors[:, 4])
    out = np.empty_like(gts)
    out[:, 0] = (gts[:, 0] - anchors[:, 0]) / d
    out[:, 1] = (gts[:, 1] - anchors[:, 1]) / d
    out[:, 2] = (gts[:, 2] - anchors[:, 2]) / anchors[:, 5]
    out[:, 3:6] = np.log(gts[:, 3:6] / anchors[:, 3:6])
    out[:, 6] = wrap_angles(gts[:, 6] - anchors[:, 6])
    return out


def decode_batch(residuals: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized ``decode`` on (N, 7) arrays; inverse of ``encode_batch``."""
    r = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    d = np.hypot(anchors[:, 3], anchors[:, 4])
    out = np.empty_like(r)
    out[:, 0] = anchors[:, 0] + r[:, 0] * d
    out[:, 1] = anchors[:, 1] + r[:, 1] * d
    out[:, 2] = anchors[:, 2] + r[:, 2] * anchors[:, 5]
    out[:, 3:6] = anchors[:, 3:6] * np.exp(r[:, 3:6])
    out[:, 6] = wrap_angles(anchors[:, 6] + r[:, 6])
    return out


def assign(anchors: list[BBox3D], gts: list[BBox3D], cfg: AssignmentConfig) -> np.ndarray:
    """Label each anchor: matched gt index, NEGATIVE (-1), or IGNORE (-2).

    An anchor is positive when its best BEV rotated IoU is >= pos_iou
    (matched to the argmax gt, ties to the lower gt index), negative when the
    best IoU is < neg_iou, ignored in between. Additionally each ground
    truth's best-overlapping anchor is forced positive even below threshold,
    provided the overlap is nonzero; conflicts resolve toward the gt with
    the higher IoU (ties to the lower gt index).
    """
    n, m = len(anchors), len(gts)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    if m == 0 or n == 0:
        return labels
    centers_a = np.array([[a.x, a.y] for a in anchors])
    radii_a = np.array([0.5 * math.hypot(a.w, a.l) for a in anchors])
    iou = np.zeros((n, m))
    for j, gt in enumerate(gts):
        gt_bev = gt.bev()
        reach = radii_a + gt_bev.circumradius
        d = centers_a - [gt.x, gt.y]
        near = (d[:, 0] ** 2 + d[:, 1] ** 2) <= reach ** 2
        for i in np.nonzero(near)[0]:
            iou[i, j] = rotated_iou(anchors[i].bev(), gt_bev)
    best = iou.max(axis=1)
    best_gt = iou.argmax(axis=1)
    labels[best >= cfg.pos_iou] = best_gt[best >= cfg.pos_iou]
    labels[(best < cfg.pos_iou) & (best >= cfg.neg_iou)] = IGNORE

    forced = sorted(range(m), key=lambda j: (iou[:, j].max(), -j))
    for j in forced:  # ascending IoU so higher-IoU gts win conflicts
        col = iou[:, j]
        if col.max() > 0.0:
            labels[int(col.argmax())] = j
    return labels


def direction_target(theta_gt: float, theta_anchor: float) -> int:
    """Heading bin: 1 when the wrapped difference lies in [0, pi), else 0."""
    d = wrap_angle(theta_gt - theta_anchor)
    return 1 if 0.0 <= d < math.pi else 0


def focal_loss(p: Tensor, y: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Per-element focal loss on probabilities.

    p is clamped to [1e-7, 1 - 1e-7]; y holds hard {0, 1} labels. For y = 1
    the loss is -alpha * (1-p)^gamma * ln p, with the complementary form for
    y = 0.
    """
    y = np.asarray(y, dtype=np.float64)
    pc = p.clamp(1e-7, 1.0 - 1e-7)
    pt = pc * y + (1.0 - pc) * (1.0 - y)
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    return -((1.0 - pt).powc(gamma) * pt.log() * alpha_t)


def direction_loss(logits: Tensor, bins: np.ndarray) -> Tensor:
    """Softmax cross-entropy over the two heading bins; logits (N, 2)."""
    return ops.softmax_cross_entropy(logits, bins)


def smooth_l1(x: Tensor) -> Tensor:
    """Re-export of the kernel op for callers working at the target level."""
    return ops.smooth_l1(x)


def stage_loss(cls_sum: Tensor, reg_sum: Tensor, dir_sum: Tensor,
               n_pos: int, weights: LossWeights) -> Tensor:
    """Combine per-stage loss sums, normalized by the positive count.

    cls_sum runs over all non-ignored samples, reg_sum and dir_sum over the
    positives only. The denominator is max(n_pos, 1) so empty scenes cannot
    produce NaN.
    """
    denom = float(max(n_pos, 1))
    total = (cls_sum * weights.beta_cls + reg_sum * weights.beta_reg
             + dir_sum * weights.beta_dir)
    return total * (1.0 / denom)
