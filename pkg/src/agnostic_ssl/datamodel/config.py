from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture of the dense detector.

    ``num_classes == 1`` is the class-agnostic configuration.
    """

    in_channels: int = 3
    backbone_widths: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (8, 16)
    neck_width: int = 32
    head_depth: int = 2
    head_width: int = 32
    num_classes: int = 1
    mask_channels: int = 4
    dynamic_width: int = 8
    scale_ranges: tuple[tuple[float, float], ...] = ((0.0, 48.0), (48.0, float("inf")))
    group_norm: int = 4
    # resolution of the mask features; finer than the first pyramid level
    mask_stride: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "backbone_widths", tuple(int(v) for v in self.backbone_widths))
        object.__setattr__(self, "strides", tuple(int(v) for v in self.strides))
        object.__setattr__(self, "scale_ranges", tuple((float(a), float(b)) for a, b in self.scale_ranges))
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not self.strides or any(s & (s - 1) for s in self.strides):
            raise ValueError(f"strides must be powers of two, got {self.strides}")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        if len(self.scale_ranges) != len(self.strides):
            raise ValueError("one scale range is needed per pyramid level")
        if self.mask_stride < 2 or self.mask_stride & (self.mask_stride - 1) or self.mask_stride > self.strides[0]:
            raise ValueError(f"mask_stride must be a power of two in [2, {self.strides[0]}], got {self.mask_stride}")
        # each backbone stage halves resolution, so the deepest stride is 2**stages
        if self.strides[-1] > 2 ** len(self.backbone_widths):
            raise ValueError(f"backbone with {len(self.backbone_widths)} stages cannot reach stride {self.strides[-1]}")

    @property
    def agnostic(self) -> bool:
        return self.num_classes == 1

    @property
    def max_stride(self) -> int:
        return self.strides[-1]

    @property
    def num_dynamic_params(self) -> int:
        """Parameter count of the two-layer 1x1 dynamic mask head."""
        c_in = self.mask_channels + 2  # features plus relative coordinates
        return c_in * self.dynamic_width + self.dynamic_width + self.dynamic_width + 1

    def with_classes(self, num_classes: int) -> "DetectorConfig":
        return replace(self, num_classes=num_classes)

    def to_dict(self) -> dict:
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}
        d["scale_ranges"] = [[a, "inf" if b == float("inf") else b] for a, b in self.scale_ranges]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        if "scale_ranges" in d:
            d["scale_ranges"] = tuple((float(a), float(b)) for a, b in d["scale_ranges"])
        return cls(**d)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def tiny_config(num_classes: int = 1) -> DetectorConfig:
    """A config with a few thousand parameters, for gradient checks."""
    return DetectorConfig(
        backbone_widths=(4, 4, 6, 6),
        neck_width=6,
        head_depth=1,
        head_width=6,
        num_classes=num_classes,
        mask_channels=2,
        dynamic_width=3,
        group_norm=2,
    )
