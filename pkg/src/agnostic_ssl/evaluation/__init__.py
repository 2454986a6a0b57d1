from .ap import (
    DESK_AREA_SPLITS,
    IOU_THRESHOLDS,
    EvalReport,
    Matching,
    average_precision,
    greedy_match,
    interpolated_ap,
    match,
)
from .geometry import iou, iou_matrix
from .pq import check_disjoint, panoptic_quality, resolve_overlaps

__all__ = [
    "DESK_AREA_SPLITS",
    "IOU_THRESHOLDS",
    "EvalReport",
    "Matching",
    "average_precision",
    "check_disjoint",
    "greedy_match",
    "interpolated_ap",
    "iou",
    "iou_matrix",
    "match",
    "panoptic_quality",
    "resolve_overlaps",
]
