"""Moving-object detection with two-stream transformers, built from scratch.

A desk-scale detection stack: an autodiff tensor core, transformer
encoder/decoder layers, spatial + temporal positional encodings, Hungarian
set matching, a synthetic two-frame benchmark with analytic optical flow,
and COCO-style mAP evaluation.
"""

from .data import (SamplePair, SceneSpec, generate_sample, mirror_expand,
                   mirror_sample, read_dataset, write_dataset)
from .evaluation import ScoredDetection, average_precision, map_report, match_detections
from .matching import (CostWeights, GroundTruthObject, box_iou, generalized_iou,
                       hungarian, matching_cost, set_loss)
from .model import ModelConfig, ModelParams, PredictionSet, build_params, count_parameters, forward
from .tensor import Tensor, finite_difference_grad
from .training import Adam, model_inputs, predict_detections, train

__version__ = "0.1.0"

__all__ = [
    "Adam", "CostWeights", "GroundTruthObject", "ModelConfig", "ModelParams",
    "PredictionSet", "SamplePair", "SceneSpec", "ScoredDetection", "Tensor",
    "average_precision", "box_iou", "build_params", "count_parameters",
    "finite_difference_grad", "forward", "generalized_iou", "generate_sample",
    "hungarian", "map_report", "match_detections", "matching_cost",
    "mirror_expand", "mirror_sample", "model_inputs", "predict_detections",
    "read_dataset", "set_loss", "train", "write_dataset",
]
