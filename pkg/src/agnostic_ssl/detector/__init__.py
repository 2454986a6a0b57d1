from .inference import Candidates, decode_candidates, infer, nms, predict
from .losses import LossOutput, LossWeights, detection_loss, dice_loss, mask_loss
from .model import DensePredictions, Detector, build_detector, from_checkpoint, load_parts, to_checkpoint
from .targets import TargetMap, assign_targets

__all__ = [
    "Candidates",
    "DensePredictions",
    "Detector",
    "LossOutput",
    "LossWeights",
    "TargetMap",
    "assign_targets",
    "build_detector",
    "decode_candidates",
    "detection_loss",
    "dice_loss",
    "from_checkpoint",
    "infer",
    "load_parts",
    "mask_loss",
    "nms",
    "predict",
    "to_checkpoint",
]
