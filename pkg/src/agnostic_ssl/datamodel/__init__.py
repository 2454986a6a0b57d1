from .checkpoint import PARTS, STAGES, Checkpoint, CheckpointError
from .coco import CocoFormatError, read_coco_json, write_coco_json
from .config import DetectorConfig, tiny_config
from .types import AnnotatedImage, BBox, DatasetSplit, Instance, Mask, ValidationError

__all__ = [
    "PARTS",
    "STAGES",
    "AnnotatedImage",
    "BBox",
    "Checkpoint",
    "CheckpointError",
    "CocoFormatError",
    "DatasetSplit",
    "DetectorConfig",
    "Instance",
    "Mask",
    "ValidationError",
    "read_coco_json",
    "tiny_config",
    "write_coco_json",
]
