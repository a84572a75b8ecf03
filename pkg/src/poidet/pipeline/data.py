"""Dataset directory handling.

A dataset directory holds one point cloud per scene (``<stem>.bin``) next to
a ``<stem>.json`` sidecar with the labeled boxes and the generator seed.
Scenes are always enumerated in sorted-stem order so every consumer walks the
same sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..synth import LabeledScene, load_scene


@dataclass(frozen=True)
class SceneRecord:
    """One scene on disk: the cloud file plus its label sidecar."""

    stem: str
    cloud_path: Path
    sidecar_path: Path

    def load(self) -> LabeledScene:
        return load_scene(self.cloud_path, self.sidecar_path)


def scan_scenes(data_dir) -> list[SceneRecord]:
    """List the scenes of a dataset directory, sorted by stem."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError("dataset directory not found: %s" % data_dir)
    records = []
    for cloud_path in sorted(data_dir.glob("*.bin")):
        sidecar = cloud_path.with_suffix(".json")
        if not sidecar.is_file():
            raise FileNotFoundError("missing label sidecar for %s" % cloud_path)
        records.append(SceneRecord(cloud_path.stem, cloud_path, sidecar))
    if not records:
        raise FileNotFoundError("no .bin scenes found in %s" % data_dir)
    return records


def load_all(records) -> list[LabeledScene]:
    return [rec.load() for rec in records]


def sizes_by_class(scenes) -> dict:
    """Collect (w, l, h) triples of every labeled box, keyed by class id."""
    out: dict = {}
    for scene in scenes:
        for box, class_id in scene.gts:
            out.setdefault(int(class_id), []).append((box.w, box.l, box.h))
    return out


def mean_z_by_class(scenes) -> dict:
    """Mean labeled center height per class id (anchor placement)."""
    heights: dict = {}
    for scene in scenes:
        for box, class_id in scene.gts:
            heights.setdefault(int(class_id), []).append(box.z)
    return {k: float(np.mean(v)) for k, v in heights.items()}
