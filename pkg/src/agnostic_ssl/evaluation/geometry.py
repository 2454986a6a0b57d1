from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from ..datamodel import BBox, Instance, Mask, ValidationError


def iou(a: Union[BBox, Mask], b: Union[BBox, Mask]) -> float:
    """Intersection over union of two boxes or two masks on the same grid."""
    if isinstance(a, BBox) and isinstance(b, BBox):
        iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
        ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
        inter = iw * ih
        return inter / (a.area + b.area - inter)
    if isinstance(a, Mask) and isinstance(b, Mask):
        if a.data.shape != b.data.shape:
            raise ValidationError(f"mask grids differ: {a.data.shape} vs {b.data.shape}")
        union = np.logical_or(a.data, b.data).sum()
        if union == 0:
            return 0.0
        return float(np.logical_and(a.data, b.data).sum() / union)
    raise ValidationError(f"iou needs two boxes or two masks, got {type(a).__name__} and {type(b).__name__}")


def box_array(instances: Sequence[Instance]) -> np.ndarray:
    return np.array([i.bbox.as_tuple() for i in instances], dtype=np.float64).reshape(-1, 4)


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def _mask_stack(instances: Sequence[Instance], shape: Optional[tuple[int, int]]) -> np.ndarray:
    if shape is None:
        shapes = {i.mask.data.shape for i in instances if i.mask is not None}
        if len(shapes) > 1:
            raise ValidationError(f"masks on different grids: {shapes}")
        shape = shapes.pop() if shapes else (0, 0)
    out = np.zeros((len(instances), shape[0] * shape[1]), dtype=np.float64)
    for k, inst in enumerate(instances):
        if inst.mask is not None:
            if inst.mask.data.shape != shape:
                raise ValidationError(f"mask grid {inst.mask.data.shape} differs from {shape}")
            out[k] = inst.mask.data.ravel()
    return out


def mask_iou_matrix(a: Sequence[Instance], b: Sequence[Instance]) -> np.ndarray:
    """Pairwise mask IoU; an instance without a mask counts as an empty mask."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    shapes = {i.mask.data.shape for i in list(a) + list(b) if i.mask is not None}
    if len(shapes) > 1:
        raise ValidationError(f"masks on different grids: {shapes}")
    shape = shapes.pop() if shapes else (1, 1)
    ma = _mask_stack(a, shape)
    mb = _mask_stack(b, shape)
    inter = ma @ mb.T
    union = ma.sum(1)[:, None] + mb.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def iou_matrix(preds: Sequence[Instance], gts: Sequence[Instance], kind: str) -> np.ndarray:
    if kind == "box":
        if not preds or not gts:
            return np.zeros((len(preds), len(gts)))
        return box_iou_matrix(box_array(preds), box_array(gts))
    if kind == "mask":
        return mask_iou_matrix(preds, gts)
    raise ValidationError(f"unknown geometry kind {kind!r}")


def geometry_area(inst: Instance, kind: str) -> float:
    if kind == "box":
        return inst.bbox.area
    return float(inst.mask.area) if inst.mask is not None else 0.0
