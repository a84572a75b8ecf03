"""Per-stage wall-time breakdown of inference.

Each (scene, repeat) sample runs the staged forward pass once with a timer
around every stage and one timer around the whole pass, so the stage times
account for the end-to-end time up to loop glue. Reported values are medians
in milliseconds. Stage keys:

- ``pillar_features``: pillarization, point decoration, the per-point linear
  layer with masked max, and pseudo-image scatter
- ``backbone``: the convolutional trunk
- ``rpn_nms``: stage-one heads, decoding, and proposal NMS
- ``proposal_prep``: second-stage sampling geometry (point positions,
  visibility masks, canonical edge order — or RoI bins)
- ``poi_features``: bilinear feature reads, gates, and pooled aggregation
- ``head``: refinement FC stack, decoding, and the final NMS

Timings are hardware facts, not contract values; nothing asserts absolutes.
A stage-one-only checkpoint reports zero for the three second-stage keys.
"""

from __future__ import annotations

import time

import numpy as np

from ..geometry import BBoxBEV, rotated_nms
from ..rng import derive_seed
from ..targets import decode_batch
from .infer import _dir_corrected, _sigmoid
from .model import Detector

STAGE_KEYS = ("pillar_features", "backbone", "rpn_nms", "proposal_prep",
              "poi_features", "head")


def _timed_pass(det: Detector, cloud: np.ndarray, pillar_seed: int) -> dict:
    inf = det.cfg.infer
    out = {}
    t_all = time.perf_counter()

    t = time.perf_counter()
    feats, coords = det.pillar_features(cloud, pillar_seed)
    image = det.pseudo_image(feats, coords)
    out["pillar_features"] = time.perf_counter() - t

    t = time.perf_counter()
    fmap = det.backbone(image)
    out["backbone"] = time.perf_counter() - t

    t = time.perf_counter()
    cls1, reg1, _ = det.rpn_heads(fmap)
    per_class = det.propose_per_class(cls1.data, reg1.data)
    out["rpn_nms"] = time.perf_counter() - t

    if det.switches.second_stage:
        t = time.perf_counter()
        boxes, cids, s1 = det.flatten_proposals(per_class)
        prep = det.stage2_prep(boxes)
        out["proposal_prep"] = time.perf_counter() - t

        t = time.perf_counter()
        agg = det.stage2_features(fmap, prep)
        out["poi_features"] = time.perf_counter() - t

        t = time.perf_counter()
        cls2, reg2, dir2 = det.refine_heads(agg)
        decoded = decode_batch(reg2.data, boxes)
        decoded = _dir_corrected(decoded, boxes[:, 6], dir2.data)
        cols = np.searchsorted(np.asarray(det.class_ids), cids)
        scores = np.sqrt(s1 * _sigmoid(cls2.data[np.arange(len(cids)), cols]))
        for class_id in det.class_ids:
            rows = np.nonzero((cids == class_id)
                              & (scores >= inf.score_floor))[0]
            if len(rows):
                rows = rows[np.lexsort((rows, -scores[rows]))]
                bevs = [BBoxBEV(b[0], b[1], b[3], b[4], b[6])
                        for b in decoded[rows]]
                rotated_nms(bevs, scores[rows].tolist(), inf.final_nms_iou,
                            max_keep=inf.max_detections)
        out["head"] = time.perf_counter() - t
    else:
        out["proposal_prep"] = 0.0
        out["poi_features"] = 0.0
        out["head"] = 0.0

    out["end_to_end"] = time.perf_counter() - t_all
    return out


def bench_detector(det_or_path, records, repeats: int) -> dict:
    """Median per-stage milliseconds over every (scene, repeat) sample."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    det = det_or_path if isinstance(det_or_path, Detector) \
        else Detector.load(det_or_path)
    scenes = [(rec.stem, rec.load()) for rec in records]
    if not scenes:
        raise ValueError("need at least one scene to benchmark")
    samples = {key: [] for key in STAGE_KEYS + ("end_to_end",)}
    for _ in range(repeats):
        for stem, scene in scenes:
            seed = derive_seed(det.cfg.infer.pillar_seed, "pillars:%s" % stem)
            one = _timed_pass(det, scene.cloud, seed)
            for key, value in one.items():
                samples[key].append(value)
    stages = {key: float(np.median(samples[key]) * 1e3) for key in STAGE_KEYS}
    return {
        "stages": stages,
        "end_to_end_ms": float(np.median(samples["end_to_end"]) * 1e3),
        "sum_of_stages_ms": float(sum(stages.values())),
        "scenes": len(scenes),
        "repeats": int(repeats),
    }
