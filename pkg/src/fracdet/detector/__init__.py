from .metrics import DetectionResult, evaluate_map, iou
from .model import Detector, DetectorConfig, build_model
from .scenes import SyntheticScene, generate_scene
from .train import evaluate, heatmap, train

__all__ = [
    "DetectionResult",
    "Detector",
    "DetectorConfig",
    "SyntheticScene",
    "build_model",
    "evaluate",
    "evaluate_map",
    "generate_scene",
    "heatmap",
    "iou",
    "train",
]
