"""Label-space transforms: class removal, entity conversion, pseudo-label filtering.

Nothing here looks at class names.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .datamodel import AnnotatedImage, DatasetSplit, Instance, Mask, ValidationError

DEFAULT_DELTA = 0.4


@dataclass(frozen=True)
class ThresholdPolicy:
    """One constant score threshold shared by every candidate."""

    delta: float = DEFAULT_DELTA

    def __post_init__(self) -> None:
        if not 0.0 <= float(self.delta) <= 1.0:
            raise ValidationError(f"delta must lie in [0, 1], got {self.delta}")


def _require_role(split: DatasetSplit, role: str, op: str) -> None:
    if split.role != role:
        raise ValidationError(f"{op} expects a {role} split, got {split.role!r}")


def to_class_agnostic(split: DatasetSplit) -> DatasetSplit:
    """Drop every class id; count, order and geometry are kept."""
    _require_role(split, "labeled", "to_class_agnostic")
    images = [
        im.with_instances(replace(inst, class_id=None) for inst in im.instances) for im in split.images
    ]
    return split.with_images(images)


def things_only(split: DatasetSplit) -> DatasetSplit:
    images = [im.with_instances(i for i in im.instances if i.kind == "thing") for im in split.images]
    return split.with_images(images)


def _resolve_entities(im: AnnotatedImage) -> list[Instance]:
    for k, inst in enumerate(im.instances):
        if inst.mask is None:
            raise ValidationError(f"image {im.id}, instance {k}: entity conversion needs masks")
    stuff = [k for k, i in enumerate(im.instances) if i.kind == "stuff"]
    things = [k for k, i in enumerate(im.instances) if i.kind == "thing"]
    # painting order: stuff first, then things by ascending score (or draw order); later paint wins
    things.sort(key=lambda k: (im.instances[k].score if im.instances[k].score is not None else -1.0, k))
    owner = np.full((im.height, im.width), -1, dtype=np.int64)
    for k in stuff + things:
        owner[im.instances[k].mask.data] = k

    out = []
    for k, inst in enumerate(im.instances):
        m = owner == k
        if not m.any():
            continue
        mask = Mask(m)
        # keep the original box unless the visible mask moved it
        tb = mask.tight_box()
        bbox = tb if inst.mask != mask else inst.bbox
        out.append(Instance(bbox=bbox, mask=mask, class_id=None, score=inst.score, kind=inst.kind))
    return out


def to_entities(split: DatasetSplit) -> DatasetSplit:
    """Things plus stuff as class-free, pairwise-disjoint mask regions.

    Overlaps go to things over stuff, then to the higher-scored (or
    later-drawn) thing. Regions left empty are dropped. Ids of images
    without any stuff region are listed in ``meta["images_without_stuff"]``.
    """
    _require_role(split, "labeled", "to_entities")
    images = []
    no_stuff = []
    for im in split.images:
        if not any(i.kind == "stuff" for i in im.instances):
            no_stuff.append(im.id)
        images.append(im.with_instances(_resolve_entities(im)))
    out = split.with_images(images)
    out.meta["images_without_stuff"] = no_stuff
    return out


def filter_predictions(preds: Sequence[Instance], policy: ThresholdPolicy) -> list[Instance]:
    """Keep predictions scoring strictly above ``policy.delta``, in input order."""
    kept = []
    for k, p in enumerate(preds):
        if p.score is None:
            raise ValidationError(f"prediction {k} has no score")
        if p.score > policy.delta:
            kept.append(p)
    return kept


def assemble_pseudo_split(
    unlabeled: DatasetSplit,
    predictions: Sequence[Sequence[Instance]],
    policy: ThresholdPolicy,
) -> DatasetSplit:
    """Filter per-image predictions and keep only images left with at least one label."""
    _require_role(unlabeled, "unlabeled", "pseudo labeling")
    if len(predictions) != len(unlabeled.images):
        raise ValueError("need one prediction list per unlabeled image")
    images = []
    for im, preds in zip(unlabeled.images, predictions):
        kept = filter_predictions(preds, policy)
        if kept:
            images.append(im.with_instances(kept))
    out = DatasetSplit(role="pseudo", images=tuple(images), class_names=None)
    out.meta.update({"delta": policy.delta, "source_images": len(unlabeled.images)})
    return out.validate()


def build_pseudo_dataset(
    unlabeled: DatasetSplit,
    labeler,
    policy: ThresholdPolicy,
    nms_iou: float = 0.6,
    use_centerness: bool = True,
    with_masks: bool = True,
    batch_size: int = 32,
) -> DatasetSplit:
    """Run the class-agnostic labeler over ``unlabeled`` and keep confident labels."""
    from .detector import predict

    if not labeler.cfg.agnostic:
        raise ValidationError("the pseudo labeler must be a class-agnostic (single-class) detector")
    unlabeled.validate(require_pixels=True)
    # candidates at or below delta would be filtered anyway, and greedy NMS never
    # lets a lower-scored box suppress a higher one, so flooring at delta is exact
    preds = predict(
        labeler,
        unlabeled.images,
        score_floor=policy.delta,
        nms_iou=nms_iou,
        mode="agnostic",
        use_centerness=use_centerness,
        with_masks=with_masks,
        batch_size=batch_size,
    )
    return assemble_pseudo_split(unlabeled, preds, policy)


def binarize_targets(split: DatasetSplit) -> DatasetSplit:
    """Scored pseudo labels become hard class-free positives; geometry is untouched."""
    _require_role(split, "pseudo", "binarize_targets")
    images = [
        im.with_instances(replace(i, score=None, class_id=None) for i in im.instances) for im in split.images
    ]
    return split.with_images(images)


def strip_scores(instances: Iterable[Instance]) -> list[Instance]:
    return [replace(i, score=None) for i in instances]
