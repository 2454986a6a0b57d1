"""Dense target assignment: inside-box positives gated by per-level scale ranges."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..datamodel import DetectorConfig, Instance, ValidationError
from .model import grid_shapes, locations_for


@dataclass
class TargetMap:
    """Per-image, per-location supervision (locations ordered as in ``DensePredictions.flat``).

    ``labels`` is 0 for background and ``class_id + 1`` otherwise (always 1
    in agnostic mode).
    """

    labels: np.ndarray  # [B, N] int64
    offsets: np.ndarray  # [B, N, 4] float64, (l, t, r, b)
    centerness: np.ndarray  # [B, N] float64
    assigned: np.ndarray  # [B, N] int64, index into the image's instance list or -1
    locations: np.ndarray  # [N, 2]

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def centerness_target(offsets: np.ndarray) -> np.ndarray:
    l, t, r, b = offsets[..., 0], offsets[..., 1], offsets[..., 2], offsets[..., 3]
    lr = np.minimum(l, r) / np.maximum(l, r)
    tb = np.minimum(t, b) / np.maximum(t, b)
    return np.sqrt(lr * tb)


def assign_image(
    instances: Sequence[Instance],
    cfg: DetectorConfig,
    image_size: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    locs = locations_for(image_size, cfg.strides)
    n = len(locs)
    labels = np.zeros(n, dtype=np.int64)
    offsets = np.zeros((n, 4), dtype=np.float64)
    ctr = np.zeros(n, dtype=np.float64)
    assigned = np.full(n, -1, dtype=np.int64)
    if not instances:
        return labels, offsets, ctr, assigned

    boxes = np.array([inst.bbox.as_tuple() for inst in instances], dtype=np.float64)  # [M, 4]
    if cfg.agnostic:
        cls = np.ones(len(instances), dtype=np.int64)
    else:
        ids = [inst.class_id for inst in instances]
        if any(c is None for c in ids):
            raise ValidationError("class-specific targets need a class id on every instance")
        cls = np.asarray(ids, dtype=np.int64) + 1
        if cls.max() > cfg.num_classes:
            raise ValidationError(f"class id {cls.max() - 1} out of range for {cfg.num_classes} classes")

    x = locs[:, 0:1]
    y = locs[:, 1:2]
    ltrb = np.stack([x - boxes[:, 0], y - boxes[:, 1], boxes[:, 2] - x, boxes[:, 3] - y], axis=2)  # [N, M, 4]
    inside = ltrb.min(axis=2) > 0
    reach = ltrb.max(axis=2)
    sizes = [gh * gw for gh, gw in grid_shapes(image_size, cfg.strides)]
    lo = np.repeat([r[0] for r in cfg.scale_ranges], sizes)[:, None]
    hi = np.repeat([r[1] for r in cfg.scale_ranges], sizes)[:, None]
    ok = inside & (reach >= lo) & (reach <= hi)

    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    cost = np.where(ok, area[None, :], np.inf)
    best = cost.argmin(axis=1)  # first minimum, so equal areas resolve to the lower index
    pos = np.isfinite(cost[np.arange(n), best])

    labels[pos] = cls[best[pos]]
    offsets[pos] = ltrb[np.flatnonzero(pos), best[pos]]
    ctr[pos] = centerness_target(offsets[pos])
    assigned[pos] = best[pos]
    return labels, offsets, ctr, assigned


def assign_targets(
    batch: Sequence[Sequence[Instance]],
    cfg: DetectorConfig,
    image_size: tuple[int, int],
) -> TargetMap:
    """Assign targets for a batch of instance lists on a common (padded) image size.

    A location is positive for an instance when its center lies strictly
    inside the box and the largest of its four distances falls in the
    level's scale range; among several such instances the smallest box wins.
    """
    per = [assign_image(insts, cfg, image_size) for insts in batch]
    n = len(locations_for(image_size, cfg.strides))
    if not per:
        empty = np.zeros((0, n))
        return TargetMap(empty.astype(np.int64), np.zeros((0, n, 4)), empty, empty.astype(np.int64),
                         locations_for(image_size, cfg.strides))
    return TargetMap(
        labels=np.stack([p[0] for p in per]),
        offsets=np.stack([p[1] for p in per]),
        centerness=np.stack([p[2] for p in per]),
        assigned=np.stack([p[3] for p in per]),
        locations=locations_for(image_size, cfg.strides),
    )
