"""poidet: a two-stage bird's-eye-view LiDAR object detector, from scratch.

The package implements the full pipeline in plain float64 numpy on a small
reverse-mode autograd core: pillar feature extraction over a BEV grid, a
two-resolution convolutional backbone, a dense one-anchor-per-class-and-
orientation proposal stage, and a second stage that pools features at
box-edge points of interest with visibility and adaptive gating before
refining each proposal. Around the detector sit a synthetic LiDAR scene
generator with edge-concentrated point densities, a center-distance
mAP evaluator, an ablation harness, a per-stage timer, and a CLI.
"""

from . import geometry, metrics, pillars, pipeline, refine, rng, rpn, synth, targets
from .geometry import BBox3D, BBoxBEV, rotated_iou, rotated_nms, wrap_angle
from .metrics import Detection, EvalReport, GroundTruth, average_precision, map_report
from .pillars import PillarGridSpec, decorate, pillarize
from .pipeline import (AblationSwitches, Detector, PipelineConfig,
                       default_config, load_config, run_inference,
                       train_detector)
from .rng import Rng, derive_seed
from .synth import ClassSpec, LabeledScene, SceneSpec, edge_density_stats, generate_scene

__version__ = "0.1.0"

__all__ = [
    "geometry", "metrics", "pillars", "pipeline", "refine", "rng", "rpn",
    "synth", "targets", "BBox3D", "BBoxBEV", "rotated_iou", "rotated_nms",
    "wrap_angle", "Detection", "EvalReport", "GroundTruth",
    "average_precision", "map_report", "PillarGridSpec", "decorate",
    "pillarize", "AblationSwitches", "Detector", "PipelineConfig",
    "default_config", "load_config", "run_inference", "train_detector",
    "Rng", "derive_seed", "ClassSpec", "LabeledScene", "SceneSpec",
    "edge_density_stats", "generate_scene", "__version__",
]
