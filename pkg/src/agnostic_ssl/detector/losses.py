"""Detection loss (focal + IoU + centerness) and the dynamic-kernel dice mask loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..datamodel import Mask
from .model import REL_COORD_SCALE, DensePredictions
from .targets import TargetMap


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    loc: float = 1.0
    ctr: float = 1.0
    mask: float = 1.0


@dataclass
class LossOutput:
    total: torch.Tensor
    parts: dict[str, torch.Tensor] = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.parts.items()}


def sigmoid_focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Elementwise focal loss; ``targets`` is a {0, 1} tensor shaped like ``logits``."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    a_t = alpha * targets + (1 - alpha) * (1 - targets)
    return a_t * (1 - p_t) ** gamma * ce


def iou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``-log IoU`` for boxes given as (l, t, r, b) distances from a shared point."""
    pl, pt, pr, pb = pred.unbind(-1)
    tl, tt, tr, tb = target.unbind(-1)
    pred_area = (pl + pr) * (pt + pb)
    target_area = (tl + tr) * (tt + tb)
    w_int = torch.minimum(pl, tl) + torch.minimum(pr, tr)
    h_int = torch.minimum(pt, tt) + torch.minimum(pb, tb)
    inter = w_int * h_int
    union = pred_area + target_area - inter
    return -torch.log((inter + 1.0) / (union + 1.0))


def dice_loss(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``1 - 2 sum(p g) / (sum(p) + sum(g))`` per leading index."""
    p = prob.flatten(1)
    g = target.flatten(1)
    num = 2 * (p * g).sum(1)
    den = (p.sum(1) + g.sum(1)).clamp_min(1e-12)
    return 1 - num / den


def detection_loss(
    preds: DensePredictions,
    targets: TargetMap,
    mode: str = "agnostic",
    weights: LossWeights = LossWeights(),
) -> LossOutput:
    cls_logits = preds.flat("cls")  # [B, N, K]
    num_classes = cls_logits.shape[-1]
    if mode == "agnostic" and num_classes != 1:
        raise ValueError(f"agnostic loss needs a single-class head, got {num_classes} classes")
    if mode not in ("agnostic", "specific"):
        raise ValueError(f"unknown mode {mode!r}")
    dtype = cls_logits.dtype

    labels = torch.from_numpy(targets.labels)
    if labels.shape != cls_logits.shape[:2]:
        raise ValueError(f"target map {tuple(labels.shape)} does not match predictions {tuple(cls_logits.shape[:2])}")
    onehot = torch.zeros_like(cls_logits)
    pos = labels > 0
    onehot[pos, labels[pos] - 1] = 1.0
    num_pos = int(pos.sum())
    l_cls = sigmoid_focal_loss(cls_logits, onehot).sum() / max(num_pos, 1)

    if num_pos:
        reg = preds.flat("reg")[pos]
        reg_t = torch.from_numpy(targets.offsets).to(dtype)[pos]
        l_loc = iou_loss(reg, reg_t).mean()
        ctr = preds.flat("ctr")[..., 0][pos]
        ctr_t = torch.from_numpy(targets.centerness).to(dtype)[pos]
        l_ctr = F.binary_cross_entropy_with_logits(ctr, ctr_t, reduction="mean")
    else:
        l_loc = cls_logits.sum() * 0.0
        l_ctr = cls_logits.sum() * 0.0

    total = weights.cls * l_cls + weights.loc * l_loc + weights.ctr * l_ctr
    return LossOutput(total, {"cls": l_cls, "loc": l_loc, "ctr": l_ctr})


def relative_coords(
    points: torch.Tensor, feat_size: tuple[int, int], feat_stride: int, dtype: torch.dtype
) -> torch.Tensor:
    """``[S, 2, h, w]`` offsets from each point to every mask-feature cell center."""
    h, w = feat_size
    ys = (torch.arange(h, dtype=dtype) + 0.5) * feat_stride
    xs = (torch.arange(w, dtype=dtype) + 0.5) * feat_stride
    px = points[:, 0].to(dtype)[:, None, None]
    py = points[:, 1].to(dtype)[:, None, None]
    rx = (px - xs[None, None, :]).expand(-1, h, -1)
    ry = (py - ys[None, :, None]).expand(-1, -1, w)
    return torch.stack([rx, ry], dim=1) / REL_COORD_SCALE


def dynamic_mask_logits(
    kernels: torch.Tensor,
    feats: torch.Tensor,
    points: torch.Tensor,
    feat_stride: int,
    dynamic_width: int,
    out_size: Optional[tuple[int, int]] = None,
) -> torch.Tensor:
    """Run each instance's generated 1x1 conv pair over its image's mask features.

    ``kernels``: ``[S, P]``; ``feats``: ``[S, M, h, w]``; ``points``: ``[S, 2]``.
    Returns ``[S, H, W]`` logits, bilinearly upsampled to ``out_size``
    (defaults to the feature size times ``feat_stride``).
    """
    s, m, h, w = feats.shape
    x = torch.cat([feats, relative_coords(points, (h, w), feat_stride, feats.dtype)], dim=1).flatten(2)  # [S, C, hw]
    c = m + 2
    d = dynamic_width
    w1 = kernels[:, : c * d].reshape(s, d, c)
    b1 = kernels[:, c * d : c * d + d].reshape(s, d, 1)
    w2 = kernels[:, c * d + d : c * d + 2 * d].reshape(s, 1, d)
    b2 = kernels[:, c * d + 2 * d :].reshape(s, 1, 1)
    hidden = torch.relu(torch.bmm(w1, x) + b1)
    logits = (torch.bmm(w2, hidden) + b2).reshape(s, 1, h, w)
    size = out_size or (h * feat_stride, w * feat_stride)
    return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)[:, 0]


def sample_mask_locations(targets: TargetMap, has_mask: Sequence[Sequence[bool]], per_image: int = 16) -> list[np.ndarray]:
    """Pick up to ``per_image`` positives per image, most central first (ties by index)."""
    out = []
    for b in range(targets.labels.shape[0]):
        idx = np.flatnonzero(targets.assigned[b] >= 0)
        idx = np.array([i for i in idx if has_mask[b][targets.assigned[b][i]]], dtype=np.int64)
        if idx.size:
            order = np.lexsort((idx, -targets.centerness[b][idx]))
            idx = idx[order][:per_image]
        out.append(idx)
    return out


def mask_loss(
    preds: DensePredictions,
    targets: TargetMap,
    gt_masks: Sequence[Sequence[Optional[Mask]]],
    dynamic_width: int,
    per_image: int = 16,
) -> torch.Tensor:
    """Mean dice loss over sampled positive locations.

    ``gt_masks[b][k]`` is the mask of instance ``k`` in image ``b`` (on the
    padded image grid or smaller; it is zero padded to the input size).
    """
    kernels_all = preds.flat("kernels")
    dtype = kernels_all.dtype
    H, W = preds.image_size
    has_mask = [[m is not None for m in masks] for masks in gt_masks]
    picks = sample_mask_locations(targets, has_mask, per_image)
    img_idx = np.concatenate([np.full(len(p), b) for b, p in enumerate(picks)]) if picks else np.zeros(0, int)
    loc_idx = np.concatenate(picks) if picks else np.zeros(0, int)
    if loc_idx.size == 0:
        return kernels_all.sum() * 0.0

    kernels = kernels_all[torch.from_numpy(img_idx), torch.from_numpy(loc_idx)]
    feats = preds.mask_feats[torch.from_numpy(img_idx)]
    points = torch.from_numpy(targets.locations[loc_idx])
    feat_stride = H // preds.mask_feats.shape[-2]
    logits = dynamic_mask_logits(kernels, feats, points, feat_stride, dynamic_width, (H, W))

    gt = np.zeros((len(loc_idx), H, W), dtype=np.float64)
    for s, (b, i) in enumerate(zip(img_idx, loc_idx)):
        m = gt_masks[b][targets.assigned[b][i]].data
        gt[s, : m.shape[0], : m.shape[1]] = m
    return dice_loss(torch.sigmoid(logits), torch.from_numpy(gt).to(dtype)).mean()
