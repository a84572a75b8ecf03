"""Inference over scene directories.

Full mode runs the complete pipeline: pillar features, backbone, stage-one
proposals, second-stage pooling and refinement, then per-class rotated NMS at
the final threshold. A refined box is scored by the geometric mean of its
proposal score and its refinement class probability: the two heads are
trained on different positive sets (anchor IoU bands versus proposal IoU
bands), so their errors decorrelate and the fused ranking beats either alone.
Baseline mode emits the stage-one proposals directly
(decoded, NMS-filtered, sigmoid-scored) and never touches second-stage
parameters; a checkpoint trained without the second stage always behaves as
baseline. Both modes drop boxes under the score floor — an empty or
object-free scene therefore yields no detections — and cap the per-scene
output at ``max_detections`` by descending score.

Per-scene pillar subsampling seeds derive from the checkpoint's inference
seed and the scene stem, so results do not depend on scene order.
"""

from __future__ import annotations

import math

import numpy as np

from ..geometry import BBox3D, BBoxBEV, rotated_nms, wrap_angles
from ..metrics import Detection
from ..rng import derive_seed
from ..targets import decode_batch
from .model import Detector


def _dir_corrected(decoded: np.ndarray, ref_theta: np.ndarray,
                   dir_logits: np.ndarray) -> np.ndarray:
    """Flip decoded headings by pi where the heading-bin head disagrees."""
    d = wrap_angles(decoded[:, 6] - ref_theta)
    implied = ((d >= 0.0) & (d < math.pi)).astype(np.int64)
    predicted = np.argmax(dir_logits, axis=1)
    out = decoded.copy()
    flip = implied != predicted
    out[flip, 6] = wrap_angles(out[flip, 6] + math.pi)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def detect_scene(det: Detector, cloud: np.ndarray, *, baseline: bool = False,
                 pillar_seed: int = 0) -> list:
    """Detect in one cloud; returns (box7, class_id, score) tuples sorted by
    descending score."""
    inf = det.cfg.infer
    baseline = baseline or not det.switches.second_stage
    fmap = det.feature_map(cloud, pillar_seed)
    cls1, reg1, _ = det.rpn_heads(fmap)
    per_class = det.propose_per_class(cls1.data, reg1.data)

    picked = []
    if baseline:
        for class_id, ps in per_class:
            for box, score in zip(ps.boxes, ps.scores):
                if score >= inf.score_floor:
                    picked.append((box, class_id, float(score)))
    else:
        boxes, cids, s1 = det.flatten_proposals(per_class)
        agg = det.stage2_features(fmap, det.stage2_prep(boxes))
        cls2, reg2, dir2 = det.refine_heads(agg)
        decoded = decode_batch(reg2.data, boxes)
        decoded = _dir_corrected(decoded, boxes[:, 6], dir2.data)
        cols = np.searchsorted(np.asarray(det.class_ids), cids)
        p2 = _sigmoid(cls2.data[np.arange(len(cids)), cols])
        scores = np.sqrt(s1 * p2)
        for class_id in det.class_ids:
            rows = np.nonzero((cids == class_id)
                              & (scores >= inf.score_floor))[0]
            if not len(rows):
                continue
            rows = rows[np.lexsort((rows, -scores[rows]))]
            bevs = [BBoxBEV(b[0], b[1], b[3], b[4], b[6])
                    for b in decoded[rows]]
            keep = rotated_nms(bevs, scores[rows].tolist(), inf.final_nms_iou,
                               max_keep=inf.max_detections)
            for r in rows[keep]:
                picked.append((decoded[r], class_id, float(scores[r])))

    picked.sort(key=lambda t: (-t[2], t[1]))
    return picked[:inf.max_detections]


def run_inference(det_or_path, records, *, baseline: bool = False):
    """Run detection over ``SceneRecord`` items.

    Returns (detections, scene_stems): flat ``Detection`` list in scene order
    plus the stem list for serialization of empty scenes.
    """
    det = det_or_path if isinstance(det_or_path, Detector) \
        else Detector.load(det_or_path)
    detections = []
    stems = []
    for rec in records:
        scene = rec.load()
        stems.append(rec.stem)
        seed = derive_seed(det.cfg.infer.pillar_seed, "pillars:%s" % rec.stem)
        for box7, class_id, score in detect_scene(
                det, scene.cloud, baseline=baseline, pillar_seed=seed):
            box = BBox3D(*(float(v) for v in box7))
            detections.append(Detection(rec.stem, box, class_id, score))
    return detections, stems
