"""Weak (multi-scale) and strong (scale/brightness/contrast jitter) augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import AnnotatedImage, BBox, Instance, Mask, ValidationError

Mode = Literal["weak", "strong"]


@dataclass(frozen=True)
class AugmentDraw:
    scale: float = 1.0
    brightness: float = 0.0
    contrast: float = 1.0

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.brightness == 0.0 and self.contrast == 1.0


@dataclass(frozen=True)
class AugmentPolicy:
    mode: Mode = "weak"
    scales: tuple[float, ...] = (0.75, 1.0, 1.25)
    scale_range: tuple[float, float] = (0.5, 1.5)
    brightness: tuple[float, float] = (-0.2, 0.2)
    contrast: tuple[float, float] = (0.75, 1.25)

    def __post_init__(self) -> None:
        if self.mode not in ("weak", "strong"):
            raise ValidationError(f"unknown augmentation mode {self.mode!r}")
        if min(self.scales) <= 0 or self.scale_range[0] <= 0:
            raise ValidationError("scales must be positive")
        if self.scale_range[0] > self.scale_range[1] or self.contrast[0] > self.contrast[1]:
            raise ValidationError("jitter ranges must be ordered (lo, hi)")
        if self.contrast[0] < 0 or abs(self.brightness[0]) > 1 or abs(self.brightness[1]) > 1:
            raise ValidationError("brightness must lie in [-1, 1] and contrast must be >= 0")

    def sample(self, rng: np.random.Generator) -> AugmentDraw:
        if self.mode == "weak":
            return AugmentDraw(scale=float(self.scales[rng.integers(len(self.scales))]))
        return AugmentDraw(
            scale=float(rng.uniform(*self.scale_range)),
            brightness=float(rng.uniform(*self.brightness)),
            contrast=float(rng.uniform(*self.contrast)),
        )


def _resize_pixels(pixels: np.ndarray, h: int, w: int) -> np.ndarray:
    t = torch.from_numpy(np.array(pixels, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def _resize_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.minimum(((np.arange(h) + 0.5) * mask.shape[0] / h).astype(np.int64), mask.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * mask.shape[1] / w).astype(np.int64), mask.shape[1] - 1)
    return mask[rows[:, None], cols[None, :]]


def _is_tight(inst: Instance) -> bool:
    tb = inst.mask.tight_box() if inst.mask is not None else None
    return tb is not None and max(abs(a - b) for a, b in zip(tb.as_tuple(), inst.bbox.as_tuple())) <= 1.0


def _rescale_instance(inst: Instance, h0: int, w0: int, h: int, w: int) -> Instance | None:
    sx, sy = w / w0, h / h0
    mask = None
    if inst.mask is not None:
        mask = Mask(_resize_mask(inst.mask.data, h, w))
        if mask.area < 1:
            return None
    if mask is not None and _is_tight(inst):
        box = mask.tight_box()
    else:
        b = inst.bbox
        x1, y1 = min(max(b.x1 * sx, 0.0), w), min(max(b.y1 * sy, 0.0), h)
        x2, y2 = min(max(b.x2 * sx, 0.0), w), min(max(b.y2 * sy, 0.0), h)
        if (x2 - x1) * (y2 - y1) < 1.0:
            return None
        box = BBox(x1, y1, x2, y2)
    return Instance(bbox=box, mask=mask, class_id=inst.class_id, score=inst.score, kind=inst.kind)


def apply(policy: AugmentPolicy, image: AnnotatedImage, draw: AugmentDraw) -> AnnotatedImage:
    """Apply ``draw`` to the image; geometry follows the pixels exactly."""
    if draw.is_identity:
        return image
    if policy.mode == "weak" and (draw.brightness != 0.0 or draw.contrast != 1.0):
        raise ValidationError("weak augmentation cannot carry photometric jitter")
    h0, w0 = image.height, image.width
    h = max(1, int(round(h0 * draw.scale)))
    w = max(1, int(round(w0 * draw.scale)))

    pixels = image.pixels
    instances = image.instances
    if (h, w) != (h0, w0):
        if pixels is not None:
            pixels = _resize_pixels(pixels, h, w)
        rescaled = (_rescale_instance(inst, h0, w0, h, w) for inst in image.instances)
        instances = tuple(i for i in rescaled if i is not None)
    if pixels is not None and (draw.brightness != 0.0 or draw.contrast != 1.0):
        px = pixels.astype(np.float32)
        mean = px.mean()
        px = (px - mean) * draw.contrast + mean + draw.brightness
        pixels = np.clip(px, 0.0, 1.0)
    return AnnotatedImage(id=image.id, height=h, width=w, pixels=pixels, instances=instances)
