"""Joint two-stage training.

Reference mode is single-threaded and bit-deterministic: the parameter init,
the per-epoch scene order, and every pillar subsampling draw come from named
sub-streams of the training seed, so two runs with equal (config, dataset,
seed) write byte-identical checkpoints.

Per scene the total loss is the sum of both stage losses, each
(beta_cls * sum(cls) + beta_reg * sum(reg) + beta_dir * sum(dir)) / max(n_pos, 1):
focal classification over non-ignored samples, smooth-L1 box residuals and
softmax heading-bin cross-entropy over positives. Stage two consumes the same
top-K/NMS proposal path as inference and matches proposals to ground truth
per class at its own thresholds, encoding residuals against the proposal box.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..geometry import BBox3D, wrap_angles
from ..kernels.optim import Adam, lr_schedule
from ..kernels.tensor import Tensor
from ..metrics import map_report
from ..rng import Rng, derive_seed
from ..rpn import mean_anchor_sizes
from ..targets import IGNORE, encode_batch, focal_loss, direction_loss, stage_loss
from ..targets import assign as assign_boxes
from ..targets import smooth_l1 as smooth_l1_loss
from .config import PipelineConfig
from .data import mean_z_by_class, scan_scenes, sizes_by_class
from .model import Detector

CHECKPOINT_NAME = "checkpoint.ifk"
LOG_NAME = "train_log.jsonl"

LOSS_KEYS = ("cls1", "reg1", "dir1", "stage1",
             "cls2", "reg2", "dir2", "stage2", "total")


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; carries the step and loss breakdown."""

    def __init__(self, step: int, parts: dict, detail: str):
        self.step = step
        self.parts = parts
        super().__init__(
            "non-finite training signal at step %d (%s); loss breakdown: %s"
            % (step, detail, json.dumps(parts, sort_keys=True)))


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    epochs: list


def _boxes7(gts) -> np.ndarray:
    return np.array([[b.x, b.y, b.z, b.w, b.l, b.h, b.theta] for b in gts],
                    dtype=np.float64).reshape(-1, 7)


def _direction_bins(gt_theta: np.ndarray, ref_theta: np.ndarray) -> np.ndarray:
    d = wrap_angles(np.asarray(gt_theta) - np.asarray(ref_theta))
    return ((d >= 0.0) & (d < math.pi)).astype(np.int64)


def _class_gts(scene, class_id: int) -> list:
    return [box for box, cid in scene.gts if int(cid) == class_id]


def build_rpn_cache(det: Detector, scenes, assign_cfg) -> list:
    """Precompute stage-one targets; anchors are fixed, so this runs once.

    Returns one entry per scene: a list over classes of dicts with global
    anchor indices for the non-ignored and positive sets, focal labels,
    encoded residual targets, and heading bins.
    """
    anchor_lists = [[s.as_bbox3d(i) for i in range(len(s))]
                    for s in det._class_anchor_sets]
    cache = []
    for scene in scenes:
        per_class = []
        for j, class_id in enumerate(det.class_ids):
            gts = _class_gts(scene, class_id)
            labels = assign_boxes(anchor_lists[j], gts, assign_cfg)
            pos = np.nonzero(labels >= 0)[0]
            ni = np.nonzero(labels != IGNORE)[0]
            gidx = det._class_anchor_idx[j]
            anchors7 = det._class_anchor_sets[j].boxes
            gt7 = _boxes7(gts)
            matched = gt7[labels[pos]] if len(pos) else np.zeros((0, 7))
            per_class.append({
                "g_ni": gidx[ni],
                "y_ni": (labels[ni] >= 0).astype(np.float64),
                "g_pos": gidx[pos],
                "reg_targets": encode_batch(matched, anchors7[pos])
                               if len(pos) else np.zeros((0, 7)),
                "dir_bins": _direction_bins(matched[:, 6], anchors7[pos, 6])
                            if len(pos) else np.zeros(0, dtype=np.int64),
            })
        cache.append(per_class)
    return cache


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


def stage1_loss(det: Detector, cls1, reg1, dir1, cached, loss_cfg):
    """Stage-one loss terms from the cached assignment of one scene."""
    cls_sum, reg_sum, dir_sum = _zero(), _zero(), _zero()
    n_pos = 0
    for entry in cached:
        if len(entry["g_ni"]):
            p = cls1.take_rows(entry["g_ni"]).sigmoid()
            cls_sum = cls_sum + focal_loss(
                p, entry["y_ni"], loss_cfg.focal_alpha, loss_cfg.focal_gamma).sum()
        if len(entry["g_pos"]):
            res = reg1.take_rows(entry["g_pos"]) - entry["reg_targets"]
            reg_sum = reg_sum + smooth_l1_loss(res).sum()
            dir_sum = dir_sum + direction_loss(
                dir1.take_rows(entry["g_pos"]), entry["dir_bins"]).sum()
            n_pos += len(entry["g_pos"])
    return cls_sum, reg_sum, dir_sum, n_pos


def stage2_targets(det: Detector, boxes: np.ndarray, cids: np.ndarray,
                   scene, assign_cfg):
    """Match flat proposals to ground truth per class.

    Returns focal labels (B, K), the non-ignored row mask, positive row
    indices, encoded residual targets, and heading bins.
    """
    nb = len(boxes)
    k = det.n_classes
    labels = np.full(nb, -1, dtype=np.int64)
    matched = np.zeros((nb, 7))
    for j, class_id in enumerate(det.class_ids):
        rows = np.nonzero(cids == class_id)[0]
        if not len(rows):
            continue
        gts = _class_gts(scene, class_id)
        plist = [BBox3D(*b) for b in boxes[rows]]
        lab = assign_boxes(plist, gts, assign_cfg)
        labels[rows] = lab
        pos_local = np.nonzero(lab >= 0)[0]
        if len(pos_local):
            matched[rows[pos_local]] = _boxes7(gts)[lab[pos_local]]
    y = np.zeros((nb, k))
    pos = np.nonzero(labels >= 0)[0]
    col = np.searchsorted(np.asarray(det.class_ids), cids[pos])
    y[pos, col] = 1.0
    keep = labels != IGNORE
    reg_targets = encode_batch(matched[pos], boxes[pos]) if len(pos) \
        else np.zeros((0, 7))
    dir_bins = _direction_bins(matched[pos, 6], boxes[pos, 6]) if len(pos) \
        else np.zeros(0, dtype=np.int64)
    return y, keep, pos, reg_targets, dir_bins


def scene_loss(det: Detector, scene, cached, cfg: PipelineConfig,
               pillar_seed: int):
    """Total loss of one scene; returns (loss Tensor, float breakdown)."""
    loss_cfg = cfg.loss
    weights = loss_cfg.weights()
    fmap = det.feature_map(scene.cloud, pillar_seed)
    cls1, reg1, dir1 = det.rpn_heads(fmap)
    c1, r1, d1, n_pos1 = stage1_loss(det, cls1, reg1, dir1, cached, loss_cfg)
    s1 = stage_loss(c1, r1, d1, n_pos1, weights)
    parts = {"cls1": float(c1.data), "reg1": float(r1.data),
             "dir1": float(d1.data), "stage1": float(s1.data)}
    total = s1
    if det.switches.second_stage:
        per_class = det.propose_per_class(cls1.data, reg1.data)
        boxes, cids, _ = det.flatten_proposals(per_class)
        agg = det.stage2_features(fmap, det.stage2_prep(boxes))
        cls2, reg2, dir2 = det.refine_heads(agg)
        y, keep, pos, reg_t, dir_bins = stage2_targets(
            det, boxes, cids, scene, cfg.assign.stage2())
        keep_idx = np.nonzero(keep)[0]
        c2, r2, d2 = _zero(), _zero(), _zero()
        if len(keep_idx):
            p = cls2.take_rows(keep_idx).sigmoid()
            c2 = focal_loss(p, y[keep_idx], loss_cfg.focal_alpha,
                            loss_cfg.focal_gamma).sum()
        if len(pos):
            r2 = smooth_l1_loss(reg2.take_rows(pos) - reg_t).sum()
            d2 = direction_loss(dir2.take_rows(pos), dir_bins).sum()
        s2 = stage_loss(c2, r2, d2, len(pos), weights)
        parts.update(cls2=float(c2.data), reg2=float(r2.data),
                     dir2=float(d2.data), stage2=float(s2.data))
        total = s1 + s2
    else:
        parts.update(cls2=0.0, reg2=0.0, dir2=0.0, stage2=0.0)
    parts["total"] = float(total.data)
    return total, parts


def _val_map(det: Detector, cfg: PipelineConfig, val_dir) -> float:
    from .infer import run_inference  # deferred: infer imports this module's peers
    from ..metrics import load_ground_truths
    detections, _ = run_inference(det, scan_scenes(val_dir))
    gts, _ = load_ground_truths(val_dir)
    report = map_report(detections, gts, class_ids=list(det.class_ids),
                        thresholds=cfg.eval.thresholds,
                        recall_only=cfg.eval.recall_only)
    return report.map


def train_detector(cfg: PipelineConfig, data_dir, out_dir,
                   *, val_dir=None, log=None) -> TrainResult:
    """Run the full training loop and write checkpoint plus metrics log.

    ``val_dir`` (or ``cfg.paths.val_data``) enables per-epoch validation mAP;
    without it the log records null. ``log`` is an optional callable fed
    one line per epoch for progress reporting.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = scan_scenes(data_dir)
    scenes = [rec.load() for rec in records]
    if val_dir is None and cfg.paths.val_data:
        val_dir = cfg.paths.val_data

    sizes = mean_anchor_sizes(sizes_by_class(scenes))
    if not sizes:
        raise ValueError("training data contains no labeled objects")
    det = Detector(cfg, sizes, mean_z_by_class(scenes), seed=cfg.train.seed)
    cache = build_rpn_cache(det, scenes, cfg.assign.rpn())

    tr = cfg.train
    opt = Adam(det.params, beta2=tr.beta2, eps=tr.eps,
               weight_decay=tr.weight_decay)
    schedule = tr.schedule()
    n = len(scenes)
    total_steps = tr.epochs * n
    step = 0
    epoch_records = []
    log_path = out_dir / LOG_NAME
    ckpt_path = out_dir / CHECKPOINT_NAME
    with open(log_path, "w") as log_file:
        for epoch in range(tr.epochs):
            order = np.arange(n)
            Rng(derive_seed(tr.seed, "order:%d" % epoch)).shuffle(order)
            sums = dict.fromkeys(LOSS_KEYS, 0.0)
            first_total = last_total = float("nan")
            t0 = time.perf_counter()
            for pos_in_epoch, i in enumerate(order):
                pillar_seed = derive_seed(tr.seed, "pillars:%s" % records[i].stem)
                loss, parts = scene_loss(det, scenes[i], cache[i], cfg,
                                         pillar_seed)
                if not math.isfinite(parts["total"]):
                    raise TrainingDiverged(step, parts, "loss is not finite")
                opt.zero_grad()
                loss.backward()
                lr, beta1 = lr_schedule(step, max(total_steps, 1), schedule)
                try:
                    opt.step(lr, beta1=beta1)
                except ValueError as exc:
                    raise TrainingDiverged(step, parts, str(exc))
                for key in LOSS_KEYS:
                    sums[key] += parts[key]
                if pos_in_epoch == 0:
                    first_total = parts["total"]
                last_total = parts["total"]
                step += 1
            record = {
                "epoch": epoch,
                "steps": n,
                "loss": {key: sums[key] / n for key in LOSS_KEYS},
                "first_step_total": first_total,
                "last_step_total": last_total,
                "seconds": time.perf_counter() - t0,
                "val_map": _val_map(det, cfg, val_dir) if val_dir else None,
            }
            epoch_records.append(record)
            line = json.dumps(record, sort_keys=True)
            log_file.write(line + "\n")
            log_file.flush()
            if log is not None:
                log(line)
    det.save(ckpt_path)
    return TrainResult(ckpt_path, log_path, epoch_records)
