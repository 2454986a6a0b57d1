"""Core value types: boxes, masks, instances, images and dataset splits."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Literal, Optional

import numpy as np

from . import rle

Kind = Literal["thing", "stuff"]
Role = Literal["labeled", "unlabeled", "pseudo"]

KINDS = ("thing", "stuff")
ROLES = ("labeled", "unlabeled", "pseudo")


class ValidationError(ValueError):
    """Raised when a value or split breaks one of its invariants."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous pixel coordinates (xyxy)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for name in ("x1", "y1", "x2", "y2"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValidationError(f"non-finite box coordinate {name}={v}")
            object.__setattr__(self, name, v)
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValidationError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.width, self.height]

    @classmethod
    def from_xywh(cls, xywh: Iterable[float]) -> "BBox":
        x, y, w, h = (float(v) for v in xywh)
        if w <= 0 or h <= 0:
            raise ValidationError(f"non-positive box size w={w} h={h}")
        return cls(x, y, x + w, y + h)

    def clip(self, width: float, height: float) -> "BBox":
        """Clip to ``[0, width] x [0, height]``; raises if nothing is left."""
        return BBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    def scale(self, sx: float, sy: float) -> "BBox":
        return BBox(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)


class Mask:
    """Immutable binary mask over an image grid.

    Pixel ``(r, c)`` covers the unit square ``[c, c+1] x [r, r+1]``.
    """

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray) -> None:
        arr = np.array(data, dtype=bool, copy=True)
        if arr.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def area(self) -> int:
        return int(self._data.sum())

    def tight_box(self) -> Optional[BBox]:
        """Smallest box covering every set pixel, or ``None`` for an empty mask."""
        rows = np.flatnonzero(self._data.any(axis=1))
        if rows.size == 0:
            return None
        cols = np.flatnonzero(self._data.any(axis=0))
        return BBox(cols[0], rows[0], cols[-1] + 1, rows[-1] + 1)

    def to_rle(self) -> dict:
        return rle.encode(self._data)

    @classmethod
    def from_rle(cls, record: dict) -> "Mask":
        return cls(rle.decode(record))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return self._data.shape == other._data.shape and bool(np.array_equal(self._data, other._data))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Mask({self.height}x{self.width}, area={self.area})"


@dataclass(frozen=True)
class Instance:
    """One labeled or predicted region.

    ``class_id is None`` means the label is class-agnostic, ``score is None``
    means the instance is ground truth (or a binarized pseudo label).
    """

    bbox: BBox
    mask: Optional[Mask] = None
    class_id: Optional[int] = None
    score: Optional[float] = None
    kind: Kind = "thing"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValidationError(f"unknown instance kind {self.kind!r}")
        if self.class_id is not None:
            if int(self.class_id) != self.class_id or self.class_id < 0:
                raise ValidationError(f"class id must be a non-negative integer, got {self.class_id}")
            object.__setattr__(self, "class_id", int(self.class_id))
        if self.score is not None:
            s = float(self.score)
            if not 0.0 <= s <= 1.0:
                raise ValidationError(f"score {s} outside [0, 1]")
            object.__setattr__(self, "score", s)

    @property
    def is_prediction(self) -> bool:
        return self.score is not None

    @property
    def area(self) -> float:
        return float(self.mask.area) if self.mask is not None else self.bbox.area

    def check(self, height: int, width: int, tight: bool = True) -> None:
        """Validate against an image of the given size.

        ``tight`` enforces the mask/box agreement rule; predictions keep a
        regressed box next to a thresholded mask, so callers disable it there.
        """
        b = self.bbox
        if b.x1 < 0 or b.y1 < 0 or b.x2 > width or b.y2 > height:
            raise ValidationError(f"box {b.as_tuple()} outside image {width}x{height}")
        if self.mask is None:
            return
        if (self.mask.height, self.mask.width) != (height, width):
            raise ValidationError(
                f"mask {self.mask.height}x{self.mask.width} does not match image {height}x{width}"
            )
        if tight:
            tb = self.mask.tight_box()
            if tb is None:
                raise ValidationError("empty mask on ground-truth instance")
            diffs = np.abs(np.subtract(tb.as_tuple(), b.as_tuple()))
            if diffs.max() > 1.0:
                raise ValidationError(f"box {b.as_tuple()} is not the tight box {tb.as_tuple()} of its mask")


@dataclass(frozen=True, eq=False)
class AnnotatedImage:
    """An image grid (``H x W x C`` floats in [0, 1]) and its instances.

    ``pixels`` may be ``None`` when only annotations were loaded.
    """

    id: str
    height: int
    width: int
    pixels: Optional[np.ndarray] = None
    instances: tuple[Instance, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances", tuple(self.instances))
        if self.pixels is not None:
            px = np.asarray(self.pixels, dtype=np.float32)
            if px.ndim != 3 or px.shape[:2] != (self.height, self.width):
                raise ValidationError(f"image {self.id}: pixels shape {px.shape} vs {self.height}x{self.width}")
            if px is self.pixels and px.flags.writeable:
                px = px.copy()
            px.setflags(write=False)
            object.__setattr__(self, "pixels", px)

    def with_instances(self, instances: Iterable[Instance]) -> "AnnotatedImage":
        return replace(self, instances=tuple(instances))

    def check(self, tight: bool = True) -> None:
        for k, inst in enumerate(self.instances):
            try:
                inst.check(self.height, self.width, tight=tight)
            except ValidationError as e:
                raise ValidationError(f"image {self.id}, instance {k}: {e}") from None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnnotatedImage):
            return NotImplemented
        if (self.id, self.height, self.width, self.instances) != (
            other.id,
            other.height,
            other.width,
            other.instances,
        ):
            return False
        if self.pixels is None or other.pixels is None:
            return self.pixels is None and other.pixels is None
        return bool(np.array_equal(self.pixels, other.pixels))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class DatasetSplit:
    """Images plus instances, tagged with the role the split plays."""

    role: Role
    images: tuple[AnnotatedImage, ...] = ()
    class_names: Optional[tuple[str, ...]] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValidationError(f"unknown split role {self.role!r}")
        object.__setattr__(self, "images", tuple(self.images))
        if self.class_names is not None:
            object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def ids(self) -> list[str]:
        return [im.id for im in self.images]

    @property
    def num_instances(self) -> int:
        return sum(len(im.instances) for im in self.images)

    def with_images(self, images: Iterable[AnnotatedImage], role: Optional[Role] = None) -> "DatasetSplit":
        return replace(self, images=tuple(images), role=role or self.role, meta=dict(self.meta))

    def validate(self, require_pixels: bool = False) -> "DatasetSplit":
        """Check role and per-image invariants; returns ``self`` so calls chain."""
        seen: set[str] = set()
        for im in self.images:
            if im.id in seen:
                raise ValidationError(f"duplicate image id {im.id!r} in {self.role} split")
            seen.add(im.id)
            if require_pixels and im.pixels is None:
                raise ValidationError(f"image {im.id} has no pixels")
            if self.role == "unlabeled" and im.instances:
                raise ValidationError(f"unlabeled image {im.id} carries {len(im.instances)} instances")
            if self.role == "pseudo" and not im.instances:
                raise ValidationError(f"pseudo image {im.id} has no pseudo labels")
            im.check(tight=self.role == "labeled")
        return self
