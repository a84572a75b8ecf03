"""Ablation harness: train a grid of switch combinations, report mAP.

The grid file is a JSON array of rows; each row gives the switch state and
an optional name, e.g. ``{"name": "full", "second_stage": true, "poi_pool":
true, "visibility": true, "adaptive": true}``. Omitted switches are off, so
``{"name": "baseline"}`` is the stage-one-only detector. Every row trains
once per seed in ``[ablate].seeds`` with everything else shared — identical
data, scene order randomness, and initialization stream per seed — and the
table reports the per-row mean and population standard deviation of
validation mAP. The default grid covers the stage-one baseline, the pooled
point second stage with each gate toggled, the full model, and both
rotated-RoI comparison shapes.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..metrics import load_ground_truths, map_report
from .config import AblationSwitches, ConfigError, PipelineConfig
from .data import scan_scenes
from .infer import run_inference
from .train import train_detector

_SWITCH_FIELDS = ("second_stage", "poi_pool", "visibility", "adaptive", "rroi")

DEFAULT_GRID = (
    {"name": "baseline"},
    {"name": "poi", "second_stage": True, "poi_pool": True},
    {"name": "poi+vis", "second_stage": True, "poi_pool": True,
     "visibility": True},
    {"name": "poi+adp", "second_stage": True, "poi_pool": True,
     "adaptive": True},
    {"name": "full", "second_stage": True, "poi_pool": True,
     "visibility": True, "adaptive": True},
    {"name": "rroi4x4", "second_stage": True, "rroi": "4x4"},
    {"name": "rroi8x4", "second_stage": True, "rroi": "8x4"},
)


@dataclass(frozen=True)
class AblationRow:
    name: str
    switches: AblationSwitches
    maps: tuple

    @property
    def map_mean(self) -> float:
        return float(np.mean(self.maps))

    @property
    def map_std(self) -> float:
        return float(np.std(self.maps))


def parse_grid(rows) -> list:
    """Validate grid rows into (name, AblationSwitches) pairs."""
    if not isinstance(rows, list) or not rows:
        raise ConfigError("switch grid must be a non-empty JSON array")
    out = []
    names = set()
    for i, row in enumerate(rows):
        if not isinstance(row, dict):
            raise ConfigError("grid row %d must be an object" % i)
        unknown = sorted(set(row) - set(_SWITCH_FIELDS) - {"name"})
        if unknown:
            raise ConfigError("grid row %d has unknown keys: %s"
                              % (i, ", ".join(unknown)))
        kwargs = {f: row[f] for f in _SWITCH_FIELDS if f in row}
        switches = AblationSwitches(
            second_stage=bool(kwargs.get("second_stage", False)),
            poi_pool=bool(kwargs.get("poi_pool", False)),
            visibility=bool(kwargs.get("visibility", False)),
            adaptive=bool(kwargs.get("adaptive", False)),
            rroi=str(kwargs.get("rroi", "off")))
        name = str(row.get("name", "row%d" % i))
        if not re.fullmatch(r"[A-Za-z0-9_+\-.]+", name):
            raise ConfigError("grid row name %r has unsafe characters" % name)
        if name in names:
            raise ConfigError("duplicate grid row name %r" % name)
        names.add(name)
        out.append((name, switches))
    return out


def load_grid(path) -> list:
    with open(path) as fh:
        return parse_grid(json.load(fh))


def run_ablation(cfg: PipelineConfig, grid, work_dir, *, log=None) -> list:
    """Train every (row, seed) combination; returns ``AblationRow`` items.

    Training data and the validation set both come from ``cfg.paths``. Run
    artifacts (checkpoints, logs) land under ``work_dir/<row>-seed<k>/``.
    """
    if not cfg.paths.train_data:
        raise ConfigError("[paths].train_data is required for the ablation")
    if not cfg.paths.val_data:
        raise ConfigError("[paths].val_data is required for the ablation")
    work_dir = Path(work_dir)
    val_records = scan_scenes(cfg.paths.val_data)
    val_gts, _ = load_ground_truths(cfg.paths.val_data)
    results = []
    for name, switches in grid:
        maps = []
        for seed in cfg.ablate.seeds:
            run_cfg = cfg.replace(
                switches=switches,
                train=dataclasses.replace(cfg.train, seed=seed))
            run_dir = work_dir / ("%s-seed%d" % (name, seed))
            trained = train_detector(run_cfg, cfg.paths.train_data, run_dir)
            detections, _ = run_inference(trained.checkpoint_path, val_records)
            report = map_report(detections, val_gts,
                                thresholds=cfg.eval.thresholds,
                                recall_only=cfg.eval.recall_only)
            maps.append(report.map)
            if log is not None:
                log(json.dumps({"row": name, "seed": seed,
                                "map": report.map}))
        results.append(AblationRow(name, switches, tuple(maps)))
    return results


def table_csv(rows) -> str:
    """Render ablation rows as the switch-table CSV."""
    lines = ["name,second_stage,poi_pool,visibility,adaptive,rroi,"
             "map_mean,map_std"]
    for row in rows:
        sw = row.switches
        lines.append("%s,%d,%d,%d,%d,%s,%.6f,%.6f" % (
            row.name, sw.second_stage, sw.poi_pool, sw.visibility,
            sw.adaptive, sw.rroi, row.map_mean, row.map_std))
    return "\n".join(lines) + "\n"
