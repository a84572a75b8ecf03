"""Center-distance detection metrics in the nuScenes style.

A detection matches a ground truth when their BEV centers are within a
distance threshold; AP is the normalized area under the interpolated
precision-recall curve above the 10% floors, averaged over the class x
{0.5, 1, 2, 4} m grid to give mAP.

Matching is greedy in descending score (ties broken by insertion order) and
each detection takes the *nearest* still-unmatched ground truth within the
threshold. Nearest-gt matching makes AP exactly monotone in the threshold:
enlarging it can only turn FPs into TPs without re-routing earlier matches.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BBox3D

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
MIN_RECALL = 0.1
MIN_PRECISION = 0.1

# Recall sub-grid of the 101-point curve strictly above the recall floor:
# r = 0.11, 0.12, ..., 1.00.
RECALL_GRID = np.arange(11, 101, dtype=np.float64) / 100.0

_BOX_KEYS = ("x", "y", "z", "w", "l", "h", "theta")


@dataclass(frozen=True)
class Detection:
    """One scored box prediction attributed to a scene."""

    scene: str
    box: BBox3D
    class_id: int
    score: float

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError("score must be finite in [0, 1], got %r" % (self.score,))


@dataclass(frozen=True)
class GroundTruth:
    """One annotated box attributed to a scene."""

    scene: str
    box: BBox3D
    class_id: int


def match(detections, ground_truths, dist: float):
    """Greedy single-class matching at one distance threshold.

    Returns (tp_flags, num_gt): boolean flags over the detections sorted by
    descending score (equal scores keep insertion order) and the recall
    denominator. Each ground truth is used at most once; a detection is a
    true positive when the nearest unmatched same-scene ground truth lies
    within ``dist`` meters of its BEV center (distance ties go to the lower
    ground-truth insertion index).
    """
    if dist <= 0:
        raise ValueError("distance threshold must be positive")
    classes = {d.class_id for d in detections} | {g.class_id for g in ground_truths}
    if len(classes) > 1:
        raise ValueError("match() takes one class at a time, got ids %s"
                         % sorted(classes))
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, i))
    open_gts: dict[str, list[tuple[int, float, float]]] = {}
    for j, g in enumerate(ground_truths):
        open_gts.setdefault(g.scene, []).append((j, g.box.x, g.box.y))

    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        det = detections[i]
        pool = open_gts.get(det.scene)
        if not pool:
            continue
        best = None
        for slot, (j, gx, gy) in enumerate(pool):
            d = math.hypot(det.box.x - gx, det.box.y - gy)
            if d <= dist and (best is None or (d, j) < best[:2]):
                best = (d, j, slot)
        if best is not None:
            tp[rank] = True
            pool.pop(best[2])
    return tp, len(ground_truths)


def interpolated_precision(tp_flags, num_gt: int) -> np.ndarray:
    """Right-continuous interpolated precision sampled on RECALL_GRID.

    p(r) is the maximum precision over operating points whose recall is at
    least r, and 0 beyond the highest achieved recall.
    """
    tp = np.asarray(tp_flags, dtype=bool)
    out = np.zeros(RECALL_GRID.size, dtype=np.float64)
    if num_gt <= 0 or tp.size == 0:
        return out
    cum = np.cumsum(tp)
    precision = cum / np.arange(1, tp.size + 1, dtype=np.float64)
    recall = cum / float(num_gt)
    best_from = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    reachable = idx < tp.size
    out[reachable] = best_from[idx[reachable]]
    return out


def average_precision(tp_flags, num_gt: int, *, recall_only: bool = False) -> float:
    """Normalized AP over the 10%-clipped PR curve.

    Default drops both floors: AP = sum(max(0, p(r) - 0.1)) / sum(1 - 0.1)
    over the recall grid. With ``recall_only`` the precision floor is not
    subtracted and the area is normalized by the recall span alone. Both
    variants are exactly 1.0 for a perfect detector (the numerator and
    denominator use the identical summation) and 0.0 with no ground truths
    or no true positives.
    """
    p = interpolated_precision(tp_flags, num_gt)
    if recall_only:
        gain = p
        ceiling = np.ones_like(p)
    else:
        gain = np.maximum(p - MIN_PRECISION, 0.0)
        ceiling = np.full_like(p, 1.0 - MIN_PRECISION)
    return float(gain.sum() / ceiling.sum())


@dataclass
class EvalReport:
    """AP per (class, threshold) cell plus the curve samples behind each."""

    thresholds: tuple[float, ...]
    class_ids: tuple[int, ...]
    ap: dict[tuple[int, float], float]
    pr: dict[tuple[int, float], np.ndarray]
    num_gt: dict[int, int]

    def class_mean_ap(self, class_id: int) -> float:
        cells = [self.ap[(class_id, d)] for d in self.thresholds]
        return float(np.mean(cells)) if cells else 0.0

    @property
    def map(self) -> float:
        cells = [self.ap[(c, d)] for c in self.class_ids for d in self.thresholds]
        return float(np.mean(cells)) if cells else 0.0

    def to_json_dict(self) -> dict:
        per_class = {
            str(c): {
                "mean_ap": self.class_mean_ap(c),
                "num_gt": self.num_gt.get(c, 0),
                "ap": {repr(d): self.ap[(c, d)] for d in self.thresholds},
            }
            for c in self.class_ids
        }
        pr = {
            "%d@%r" % (c, d): list(self.pr[(c, d)])
            for c in self.class_ids for d in self.thresholds
        }
        return {
            "thresholds": list(self.thresholds),
            "recall_grid": list(RECALL_GRID),
            "classes": per_class,
            "map": self.map,
            "pr": pr,
        }

    def to_csv_text(self) -> str:
        lines = ["class,threshold,ap"]
        for c in self.class_ids:
            for d in self.thresholds:
                lines.append("%d,%r,%.6f" % (c, d, self.ap[(c, d)]))
        return "\n".join(lines) + "\n"


def map_report(detections, ground_truths, class_ids=None,
               thresholds=DIST_THRESHOLDS, *, recall_only: bool = False) -> EvalReport:
    """Full evaluation: AP per class and threshold, mAP over the grid.

    ``class_ids`` defaults to every id present in either input; pass the
    dataset's class list to also score classes with no predictions and no
    annotations (their AP is 0).
    """
    if class_ids is None:
        ids = {d.class_id for d in detections} | {g.class_id for g in ground_truths}
        class_ids = tuple(sorted(ids))
    else:
        class_ids = tuple(class_ids)
    thresholds = tuple(float(d) for d in thresholds)

    ap: dict[tuple[int, float], float] = {}
    pr: dict[tuple[int, float], np.ndarray] = {}
    num_gt: dict[int, int] = {}
    for c in class_ids:
        dets_c = [d for d in detections if d.class_id == c]
        gts_c = [g for g in ground_truths if g.class_id == c]
        num_gt[c] = len(gts_c)
        for d in thresholds:
            flags, n = match(dets_c, gts_c, d)
            pr[(c, d)] = interpolated_precision(flags, n)
            ap[(c, d)] = average_precision(flags, n, recall_only=recall_only)
    return EvalReport(thresholds, class_ids, ap, pr, num_gt)


# --------------------------------------------------------------------------
# serialization

def _det_record(det: Detection) -> dict:
    b = det.box
    return {"x": b.x, "y": b.y, "z": b.z, "w": b.w, "l": b.l, "h": b.h,
            "theta": b.theta, "class": det.class_id, "score": det.score}


def _parse_box(rec: dict) -> BBox3D:
    return BBox3D(*(float(rec[k]) for k in _BOX_KEYS))


def save_detections(detections, path, scenes=None) -> None:
    """Write the JSON-lines detections file, one scene object per line.

    With ``scenes`` the lines follow that order and cover exactly those ids
    (scenes without detections get empty lists); otherwise scenes appear in
    first-detection order.
    """
    by_scene: dict[str, list[Detection]] = {}
    if scenes is not None:
        for s in scenes:
            by_scene[s] = []
    for det in detections:
        if scenes is not None and det.scene not in by_scene:
            raise ValueError("detection references scene %r outside the "
                             "provided scene list" % (det.scene,))
        by_scene.setdefault(det.scene, []).append(det)
    lines = [json.dumps({"scene": s, "detections": [_det_record(d) for d in ds]})
             for s, ds in by_scene.items()]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_detections(path) -> list[Detection]:
    out: list[Detection] = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            scene = str(rec["scene"])
            for item in rec["detections"]:
                out.append(Detection(scene, _parse_box(item),
                                     int(item["class"]), float(item["score"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError("%s: bad detections line %d: %s" % (path, ln, exc))
    return out


def load_ground_truths(data_dir) -> tuple[list[GroundTruth], list[str]]:
    """Read every scene sidecar (*.json) under a dataset directory.

    Returns the flat ground-truth list and the sorted scene ids (file stems),
    so callers can report scenes that received no detections.
    """
    data_dir = Path(data_dir)
    sidecars = sorted(data_dir.glob("*.json"))
    if not sidecars:
        raise FileNotFoundError("no scene sidecars (*.json) in %s" % (data_dir,))
    gts: list[GroundTruth] = []
    scenes: list[str] = []
    for sc in sidecars:
        meta = json.loads(sc.read_text())
        scenes.append(sc.stem)
        for rec in meta["boxes"]:
            gts.append(GroundTruth(sc.stem, _parse_box(rec), int(rec["class"])))
    return gts, scenes
