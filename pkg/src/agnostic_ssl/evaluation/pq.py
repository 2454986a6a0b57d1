"""Panoptic quality over non-overlapping segmentations."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..datamodel import Instance, Mask, ValidationError
from .ap import EvalReport
from .geometry import mask_iou_matrix


def check_disjoint(instances: Sequence[Instance], what: str) -> None:
    masks = [i.mask for i in instances]
    if any(m is None for m in masks):
        raise ValidationError(f"{what}: every segment needs a mask")
    if len(masks) < 2:
        return
    cover = np.sum([m.data for m in masks], axis=0)
    if cover.max() > 1:
        raise ValidationError(f"{what}: segments overlap on {int((cover > 1).sum())} pixels")


def panoptic_quality(
    preds: Sequence[Sequence[Instance]],
    gts: Sequence[Sequence[Instance]],
    class_aware: bool = False,
) -> EvalReport:
    """PQ = sum of matched IoU / (TP + FP/2 + FN/2), pooled over the dataset.

    A prediction and a GT segment match when IoU > 0.5 (and, with
    ``class_aware``, their class ids agree). Disjointness on both sides
    makes such matches unique; this is asserted per prediction.
    """
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} prediction lists for {len(gts)} images")
    tp = fp = fn = 0
    iou_terms = []
    for img, (ps, gs) in enumerate(zip(preds, gts)):
        check_disjoint(ps, f"image {img} predictions")
        check_disjoint(gs, f"image {img} ground truth")
        ious = mask_iou_matrix(list(ps), list(gs))
        if class_aware and len(ps) and len(gs):
            same = np.array([[p.class_id == g.class_id for g in gs] for p in ps])
            ious = np.where(same, ious, 0.0)
        hits = ious > 0.5
        if len(ps) and len(gs):
            if (hits.sum(axis=1) > 1).any() or (hits.sum(axis=0) > 1).any():
                raise AssertionError("IoU > 0.5 matched one segment twice; inputs cannot be disjoint")
        n_hit = int(hits.sum())
        tp += n_hit
        fp += len(ps) - n_hit
        fn += len(gs) - n_hit
        iou_terms.extend(ious[hits].tolist())
    report = EvalReport(tp=tp, fp=fp, fn=fn)
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom > 0:
        iou_sum = math.fsum(iou_terms)
        report.pq = iou_sum / denom
        report.rq = tp / denom
        report.sq = iou_sum / tp if tp else 0.0
    return report


def resolve_overlaps(instances: Sequence[Instance], min_visible: float = 0.5) -> list[Instance]:
    """Paste predicted masks by descending score so segments become disjoint.

    A segment keeps only pixels not already claimed; it is dropped when less
    than ``min_visible`` of its mask survives.
    """
    order = sorted(range(len(instances)), key=lambda k: -(instances[k].score or 0.0))
    claimed = None
    out = []
    for k in order:
        inst = instances[k]
        if inst.mask is None or inst.mask.area == 0:
            continue
        data = inst.mask.data
        if claimed is None:
            claimed = np.zeros_like(data)
        free = data & ~claimed
        if free.sum() < min_visible * data.sum() or not free.any():
            continue
        claimed |= free
        mask = Mask(free)
        out.append(Instance(bbox=mask.tight_box(), mask=mask, class_id=inst.class_id, score=inst.score, kind=inst.kind))
    return out
