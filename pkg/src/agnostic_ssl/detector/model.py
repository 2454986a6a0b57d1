"""A miniature conditional-convolution detector.

Layout: strided conv backbone, two-level top-down feature pyramid, a head
tower shared across levels with regression / centerness / kernel branches,
a classifier conv, and a mask-feature branch at a stride finer than the pyramid.
Each detected location emits the weights of a tiny two-layer 1x1 conv that
is run over the mask features to produce that instance's mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..datamodel import PARTS, Checkpoint, CheckpointError, DetectorConfig

# relative coordinates fed to the dynamic mask head are divided by this
REL_COORD_SCALE = 32.0
# clamp on the regression exponent; keeps exp() finite
MAX_LOG_OFFSET = 10.0


def _conv_gn(c_in: int, c_out: int, stride: int, groups: int) -> nn.Sequential:
    g = math.gcd(groups, c_out)
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(g, c_out),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    def __init__(self, cfg: DetectorConfig) -> None:
        super().__init__()
        stages = []
        c_in = cfg.in_channels
        for width in cfg.backbone_widths:
            stages.append(nn.Sequential(_conv_gn(c_in, width, 2, cfg.group_norm), _conv_gn(width, width, 1, cfg.group_norm)))
            c_in = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Neck(nn.Module):
    """Top-down pyramid over the backbone stages matching ``cfg.strides``."""

    def __init__(self, cfg: DetectorConfig) -> None:
        super().__init__()
        self.stage_index = [int(math.log2(s)) - 1 for s in cfg.strides]
        widths = [cfg.backbone_widths[i] for i in self.stage_index]
        self.lateral = nn.ModuleList(nn.Conv2d(w, cfg.neck_width, 1) for w in widths)
        self.output = nn.ModuleList(nn.Conv2d(cfg.neck_width, cfg.neck_width, 3, padding=1) for _ in widths)

    def forward(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        lat = [conv(feats[i]) for conv, i in zip(self.lateral, self.stage_index)]
        for k in range(len(lat) - 2, -1, -1):
            lat[k] = lat[k] + F.interpolate(lat[k + 1], size=lat[k].shape[-2:], mode="nearest")
        return [conv(p) for conv, p in zip(self.output, lat)]


class Head(nn.Module):
    """Shared tower plus regression, centerness, kernel and mask-feature branches."""

    def __init__(self, cfg: DetectorConfig) -> None:
        super().__init__()
        layers = []
        c_in = cfg.neck_width
        for _ in range(cfg.head_depth):
            layers.append(_conv_gn(c_in, cfg.head_width, 1, cfg.group_norm))
            c_in = cfg.head_width
        self.tower = nn.Sequential(*layers)
        self.reg = nn.Conv2d(c_in, 4, 3, padding=1)
        self.ctr = nn.Conv2d(c_in, 1, 3, padding=1)
        self.kernel = nn.Conv2d(c_in, cfg.num_dynamic_params, 3, padding=1)
        self.level_scales = nn.Parameter(torch.ones(len(cfg.strides)))
        # mask features: the finest pyramid level upsampled and fused with a
        # higher-resolution backbone stage
        self.mask_stage = int(math.log2(cfg.mask_stride)) - 1
        self.mask_lateral = nn.Conv2d(cfg.backbone_widths[self.mask_stage], cfg.neck_width, 1)
        self.mask_branch = nn.Sequential(
            _conv_gn(cfg.neck_width, cfg.neck_width, 1, cfg.group_norm),
            nn.Conv2d(cfg.neck_width, cfg.mask_channels, 1),
        )
        for conv in (self.reg, self.ctr, self.kernel):
            nn.init.normal_(conv.weight, std=0.01)
            nn.init.zeros_(conv.bias)


class Classifier(nn.Module):
    def __init__(self, cfg: DetectorConfig, prior: float = 0.01) -> None:
        super().__init__()
        self.conv = nn.Conv2d(cfg.head_width if cfg.head_depth else cfg.neck_width, cfg.num_classes, 3, padding=1)
        nn.init.normal_(self.conv.weight, std=0.01)
        nn.init.constant_(self.conv.bias, -math.log((1 - prior) / prior))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


@dataclass
class DensePredictions:
    """Raw dense outputs, one tensor per pyramid level.

    ``reg`` holds non-negative (l, t, r, b) distances in pixels.
    """

    cls: list[torch.Tensor]  # [B, K, h, w]
    reg: list[torch.Tensor]  # [B, 4, h, w]
    ctr: list[torch.Tensor]  # [B, 1, h, w]
    kernels: list[torch.Tensor]  # [B, P, h, w]
    mask_feats: torch.Tensor  # [B, M, H/mask_stride, W/mask_stride]
    strides: tuple[int, ...]
    image_size: tuple[int, int]

    @property
    def batch_size(self) -> int:
        return self.mask_feats.shape[0]

    def flat(self, name: str) -> torch.Tensor:
        """Concatenate a per-level field to ``[B, N, C]`` in level-major, row-major order."""
        parts = [t.flatten(2).transpose(1, 2) for t in getattr(self, name)]
        return torch.cat(parts, dim=1)

    def locations(self) -> np.ndarray:
        return locations_for(self.image_size, self.strides)

    def level_of_location(self) -> np.ndarray:
        sizes = [t.shape[-2] * t.shape[-1] for t in self.cls]
        return np.repeat(np.arange(len(sizes)), sizes)


def grid_shapes(image_size: tuple[int, int], strides: Iterable[int]) -> list[tuple[int, int]]:
    h, w = image_size
    return [(-(-h // s), -(-w // s)) for s in strides]


def locations_for(image_size: tuple[int, int], strides: Iterable[int]) -> np.ndarray:
    """Pixel centers ``(x, y)`` of every location, level-major then row-major."""
    out = []
    for s, (gh, gw) in zip(strides, grid_shapes(image_size, strides)):
        ys, xs = np.mgrid[0:gh, 0:gw]
        out.append(np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], axis=1))
    return np.concatenate(out, axis=0)


class Detector(nn.Module):
    """Dense detector whose parameters split into backbone / neck / head / classifier."""

    def __init__(self, cfg: DetectorConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.neck = Neck(cfg)
        self.head = Head(cfg)
        self.classifier = Classifier(cfg)

    def forward(self, images: torch.Tensor) -> DensePredictions:
        """``images``: ``[B, C, H, W]`` with H, W divisible by the largest stride."""
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1] != cfg.in_channels:
            raise ValueError(f"expected [B, {cfg.in_channels}, H, W] input, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % cfg.max_stride or w % cfg.max_stride:
            raise ValueError(f"input {h}x{w} not divisible by stride {cfg.max_stride}; pad first")
        feats = self.backbone(images)
        pyramid = self.neck(feats)
        cls, reg, ctr, ker = [], [], [], []
        for lvl, (p, stride) in enumerate(zip(pyramid, cfg.strides)):
            t = self.head.tower(p)
            cls.append(self.classifier(t))
            log_off = (self.head.level_scales[lvl] * self.head.reg(t)).clamp(max=MAX_LOG_OFFSET)
            reg.append(torch.exp(log_off) * stride)
            ctr.append(self.head.ctr(t))
            ker.append(self.head.kernel(t))
        fine = feats[self.head.mask_stage]
        fused = self.head.mask_lateral(fine) + F.interpolate(pyramid[0], size=fine.shape[-2:], mode="nearest")
        mask_feats = self.head.mask_branch(fused)
        return DensePredictions(cls, reg, ctr, ker, mask_feats, cfg.strides, (h, w))

    def part(self, name: str) -> nn.Module:
        if name not in PARTS:
            raise KeyError(name)
        return getattr(self, name)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_detector(cfg: DetectorConfig, seed: int, dtype: torch.dtype = torch.float32) -> Detector:
    """Freshly initialized detector; the same (cfg, seed) always gives the same weights."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = Detector(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def export_parts(model: Detector) -> dict[str, dict[str, np.ndarray]]:
    return {
        part: {k: v.detach().cpu().numpy().copy() for k, v in model.part(part).state_dict().items()}
        for part in PARTS
    }


def to_checkpoint(model: Detector, **metadata) -> Checkpoint:
    meta = {"config": model.cfg.to_dict(), "config_digest": model.cfg.digest()}
    meta.update(metadata)
    return Checkpoint(parts=export_parts(model), metadata=meta)


def load_parts(model: Detector, ckpt: Checkpoint, parts: Optional[Iterable[str]] = None) -> Detector:
    """Copy the requested parts of ``ckpt`` into ``model`` in place; other parts are untouched."""
    wanted = list(ckpt.parts) if parts is None else list(parts)
    for part in wanted:
        if part not in ckpt.parts:
            raise CheckpointError(f"checkpoint does not carry part {part!r}")
        target = model.part(part).state_dict()
        source = ckpt.parts[part]
        missing = set(target) - set(source)
        if missing:
            raise CheckpointError(f"part {part!r}: checkpoint lacks tensors {sorted(missing)}")
        for name, tensor in target.items():
            arr = source[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"part {part!r}, tensor {name!r}: shape {tuple(arr.shape)} != model {tuple(tensor.shape)}"
                )
        with torch.no_grad():
            for name, tensor in target.items():
                tensor.copy_(torch.from_numpy(np.asarray(source[name])).to(tensor.dtype))
    return model


def from_checkpoint(ckpt: Checkpoint, dtype: torch.dtype = torch.float32) -> Detector:
    cfg = DetectorConfig.from_dict(ckpt.metadata["config"])
    model = build_detector(cfg, seed=0, dtype=dtype)
    return load_parts(model, ckpt)
