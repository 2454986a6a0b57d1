"""Test-time decoding: scoring, greedy NMS and dynamic-kernel masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from ..datamodel import AnnotatedImage, BBox, Instance, Mask
from ..evaluation.geometry import box_iou_matrix
from .losses import dynamic_mask_logits
from .model import Detector, DensePredictions


@dataclass
class Candidates:
    """Decoded pre-NMS candidates for one image, sorted by descending score."""

    boxes: np.ndarray  # [n, 4] xyxy, clipped to the image
    scores: np.ndarray  # [n]
    labels: np.ndarray  # [n] class index
    locations: np.ndarray  # [n] flat location index


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, labels: Optional[np.ndarray] = None) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order.

    With ``labels``, boxes only suppress boxes of the same label.
    Equal scores keep input order.
    """
    order = np.argsort(-scores, kind="stable")
    if order.size == 0:
        return order
    ious = box_iou_matrix(boxes[order], boxes[order])
    if labels is not None:
        same = labels[order][:, None] == labels[order][None, :]
        ious = np.where(same, ious, 0.0)
    suppressed = np.zeros(order.size, dtype=bool)
    keep = []
    for i in range(order.size):
        if suppressed[i]:
            continue
        keep.append(order[i])
        suppressed |= ious[i] > iou_threshold
    return np.asarray(keep, dtype=np.int64)


def location_scores(preds: DensePredictions, b: int, use_centerness: bool = True) -> np.ndarray:
    cls = torch.sigmoid(preds.flat("cls")[b]).double()
    if use_centerness:
        ctr = torch.sigmoid(preds.flat("ctr")[b]).double()
        return torch.sqrt(cls * ctr).numpy()
    return cls.numpy()


def decode_candidates(
    preds: DensePredictions,
    b: int,
    image_size: tuple[int, int],
    score_floor: float,
    use_centerness: bool = True,
    pre_nms_top: Optional[int] = 1000,
) -> Candidates:
    h, w = image_size
    scores = location_scores(preds, b, use_centerness)  # [N, K]
    loc_idx, lab = np.nonzero(scores > score_floor)
    s = scores[loc_idx, lab]
    order = np.argsort(-s, kind="stable")
    if pre_nms_top is not None:
        order = order[:pre_nms_top]
    loc_idx, lab, s = loc_idx[order], lab[order], s[order]
    locs = preds.locations()[loc_idx]
    reg = preds.flat("reg")[b].detach().double().numpy()[loc_idx]
    boxes = np.stack(
        [locs[:, 0] - reg[:, 0], locs[:, 1] - reg[:, 1], locs[:, 0] + reg[:, 2], locs[:, 1] + reg[:, 3]], axis=1
    ).reshape(-1, 4)
    boxes[:, 0::2] = boxes[:, 0::2].clip(0, w)
    boxes[:, 1::2] = boxes[:, 1::2].clip(0, h)
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    return Candidates(boxes[ok], s[ok], lab[ok], loc_idx[ok])


def _pad_batch(images: Sequence[AnnotatedImage], multiple: int) -> torch.Tensor:
    h = max(im.height for im in images)
    w = max(im.width for im in images)
    h = -(-h // multiple) * multiple
    w = -(-w // multiple) * multiple
    c = images[0].pixels.shape[2]
    batch = np.zeros((len(images), c, h, w), dtype=np.float32)
    for i, im in enumerate(images):
        batch[i, :, : im.height, : im.width] = np.transpose(im.pixels, (2, 0, 1))
    return torch.from_numpy(batch)


def to_batch(images: Sequence[AnnotatedImage], model: Detector) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return _pad_batch(images, model.cfg.max_stride).to(dtype)


@torch.no_grad()
def predict(
    model: Detector,
    images: Sequence[AnnotatedImage],
    score_floor: float = 0.05,
    nms_iou: float = 0.6,
    mode: str = "agnostic",
    use_centerness: bool = True,
    max_detections: Optional[int] = None,
    with_masks: bool = True,
    batch_size: int = 32,
) -> list[list[Instance]]:
    """Run ``infer`` over many images, forwarding them in batches."""
    out: list[list[Instance]] = []
    was_training = model.training
    model.eval()
    try:
        for start in range(0, len(images), batch_size):
            chunk = list(images[start : start + batch_size])
            # images of different sizes are forwarded one by one so padding never changes results
            sizes = {(im.height, im.width) for im in chunk}
            groups = [chunk] if len(sizes) == 1 else [[im] for im in chunk]
            for group in groups:
                preds = model(to_batch(group, model))
                for b, im in enumerate(group):
                    out.append(
                        _decode_image(model, preds, b, im, score_floor, nms_iou, mode, use_centerness,
                                      max_detections, with_masks)
                    )
    finally:
        model.train(was_training)
    return out


def infer(
    model: Detector,
    image: AnnotatedImage,
    score_floor: float = 0.05,
    nms_iou: float = 0.6,
    mode: str = "agnostic",
    use_centerness: bool = True,
    max_detections: Optional[int] = None,
    with_masks: bool = True,
) -> list[Instance]:
    """Scored instances for one image, sorted by descending score.

    Score is ``sqrt(sigmoid(cls) * sigmoid(centerness))`` (plain class
    probability with ``use_centerness=False``). Candidates must score
    strictly above ``score_floor``. NMS is class-agnostic in agnostic mode
    and per class otherwise. Masks are the dynamic-kernel logit maps
    thresholded at probability 0.5 and cropped to the predicted box.
    """
    return predict(model, [image], score_floor, nms_iou, mode, use_centerness, max_detections, with_masks)[0]


def _decode_image(
    model: Detector,
    preds: DensePredictions,
    b: int,
    image: AnnotatedImage,
    score_floor: float,
    nms_iou: float,
    mode: str,
    use_centerness: bool,
    max_detections: Optional[int],
    with_masks: bool,
) -> list[Instance]:
    if mode not in ("agnostic", "specific"):
        raise ValueError(f"unknown mode {mode!r}")
    h, w = image.height, image.width
    cand = decode_candidates(preds, b, (h, w), score_floor, use_centerness)
    keep = nms(cand.boxes, cand.scores, nms_iou, None if mode == "agnostic" else cand.labels)
    if max_detections is not None:
        keep = keep[:max_detections]
    if keep.size == 0:
        return []

    masks: list[Optional[np.ndarray]] = [None] * len(keep)
    if with_masks:
        H, W = preds.image_size
        loc = cand.locations[keep]
        kernels = preds.flat("kernels")[b][torch.from_numpy(loc)]
        feats = preds.mask_feats[b : b + 1].expand(len(keep), -1, -1, -1)
        points = torch.from_numpy(preds.locations()[loc])
        stride = H // preds.mask_feats.shape[-2]
        logits = dynamic_mask_logits(kernels, feats, points, stride, model.cfg.dynamic_width, (H, W))
        binary = (logits[:, :h, :w] > 0).numpy()
        yy = np.arange(h)[:, None] + 0.5
        xx = np.arange(w)[None, :] + 0.5
        for k, box in enumerate(cand.boxes[keep]):
            inside = (xx >= box[0]) & (xx <= box[2]) & (yy >= box[1]) & (yy <= box[3])
            m = binary[k] & inside
            masks[k] = m if m.any() else None

    out = []
    for k, i in enumerate(keep):
        out.append(
            Instance(
                bbox=BBox(*cand.boxes[i]),
                mask=Mask(masks[k]) if masks[k] is not None else None,
                class_id=None if mode == "agnostic" else int(cand.labels[i]),
                score=float(cand.scores[i]),
            )
        )
    return out
