"""End-to-end orchestration: config, data, model, training, inference,
ablation, and timing."""

from .ablate import AblationRow, DEFAULT_GRID, load_grid, parse_grid, run_ablation, table_csv
from .bench import STAGE_KEYS, bench_detector
from .config import (AblateConfig, AblationSwitches, AssignConfig, ConfigError,
                     EvalConfig, InferConfig, LossConfig, ModelConfig,
                     PathsConfig, PipelineConfig, ProposalConfig, TrainConfig,
                     config_from_dict, default_config, load_config)
from .data import SceneRecord, load_all, mean_z_by_class, scan_scenes, sizes_by_class
from .infer import detect_scene, run_inference
from .model import Detector, SENSOR, STRIDE
from .train import (TrainResult, TrainingDiverged, build_rpn_cache,
                    scene_loss, train_detector)

__all__ = [
    "AblationRow", "DEFAULT_GRID", "load_grid", "parse_grid", "run_ablation",
    "table_csv", "STAGE_KEYS", "bench_detector", "AblateConfig",
    "AblationSwitches", "AssignConfig", "ConfigError", "EvalConfig",
    "InferConfig", "LossConfig", "ModelConfig", "PathsConfig",
    "PipelineConfig", "ProposalConfig", "TrainConfig", "config_from_dict",
    "default_config", "load_config", "SceneRecord", "load_all",
    "mean_z_by_class", "scan_scenes", "sizes_by_class", "detect_scene",
    "run_inference", "Detector", "SENSOR", "STRIDE", "TrainResult",
    "TrainingDiverged", "build_rpn_cache", "scene_loss", "train_detector",
]
