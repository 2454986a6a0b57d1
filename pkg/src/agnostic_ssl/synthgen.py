"""Deterministic synthetic dataset: colored shapes (things) over sky/ground bands (stuff).

Every image is a valid panoptic ground truth: thing masks are visibility
resolved by draw order and the two stuff masks cover all remaining pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import AnnotatedImage, DatasetSplit, Instance, Mask, ValidationError

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.85),
}
STUFF = {
    "sky": (0.60, 0.78, 0.95),
    "ground": (0.45, 0.35, 0.20),
}


def default_thing_classes() -> tuple[tuple[str, str], ...]:
    return tuple((shape, color) for shape in SHAPES for color in COLORS)


@dataclass(frozen=True)
class SynthSpec:
    height: int = 64
    width: int = 64
    num_images: int = 100
    max_things: int = 5
    thing_classes: tuple[tuple[str, str], ...] = field(default_factory=default_thing_classes)
    stuff_classes: tuple[str, ...] = ("sky", "ground")
    noise: float = 0.05
    seed: int = 0
    min_size: int = 10
    max_size: int = 22
    id_prefix: str = "syn"

    def __post_init__(self) -> None:
        if self.height < 32 or self.width < 32:
            raise ValidationError("image size must be at least 32x32")
        if not self.thing_classes or not self.stuff_classes:
            raise ValidationError("class tables must be non-empty")
        if self.num_images < 0 or self.max_things < 0:
            raise ValidationError("num_images and max_things must be non-negative")
        if not 2 <= self.min_size <= self.max_size < min(self.height, self.width):
            raise ValidationError("need 2 <= min_size <= max_size < image size")
        for shape, color in self.thing_classes:
            if shape not in SHAPES or color not in COLORS:
                raise ValidationError(f"unknown thing class {(shape, color)}")
        for name in self.stuff_classes:
            if name not in STUFF:
                raise ValidationError(f"unknown stuff class {name!r}")

    @property
    def class_names(self) -> tuple[str, ...]:
        things = tuple(f"{color}_{shape}" for shape, color in self.thing_classes)
        return things + tuple(self.stuff_classes)


def _shape_mask(shape: str, cx: float, cy: float, size: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    x = xx + 0.5 - cx
    y = yy + 0.5 - cy
    half = size / 2.0
    if shape == "circle":
        return x * x + y * y <= half * half
    if shape == "square":
        return (np.abs(x) <= half) & (np.abs(y) <= half)
    # upward triangle: apex at top, base at bottom
    t = (y + half) / size
    return (t >= 0) & (t <= 1) & (np.abs(x) <= half * t)


def _bands(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    """Stuff label per row-band; one horizon per image, with a gentle tilt."""
    h, w = spec.height, spec.width
    n = len(spec.stuff_classes)
    if n == 1:
        return np.zeros((h, w), dtype=np.int64)
    cuts = np.sort(rng.uniform(0.3, 0.7, size=n - 1)) * h
    tilt = rng.uniform(-0.15, 0.15)
    yy, xx = np.mgrid[0:h, 0:w]
    offset = yy + 0.5 - tilt * (xx + 0.5 - w / 2)
    return np.searchsorted(cuts, offset.ravel()).reshape(h, w)


def generate_image(spec: SynthSpec, index: int) -> AnnotatedImage:
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.height, spec.width
    n_thing_cls = len(spec.thing_classes)

    band = _bands(rng, spec)
    pixels = np.zeros((h, w, 3), dtype=np.float64)
    for k, name in enumerate(spec.stuff_classes):
        tint = np.asarray(STUFF[name]) + rng.uniform(-0.06, 0.06, size=3)
        shade = 1.0 + 0.1 * ((np.arange(h) + 0.5) / h - 0.5)
        region = band == k
        fill = np.broadcast_to(tint[None, None, :] * shade[:, None, None], (h, w, 3))
        pixels[region] = fill[region]

    owner = np.full((h, w), -1, dtype=np.int64)
    things: list[tuple[int, int]] = []  # (class id, original area)
    n_things = int(rng.integers(0, spec.max_things + 1))
    for _ in range(n_things):
        cls = int(rng.integers(n_thing_cls))
        shape, color = spec.thing_classes[cls]
        rgb = np.clip(np.asarray(COLORS[color]) + rng.uniform(-0.08, 0.08, size=3), 0, 1)
        for _attempt in range(10):
            size = rng.uniform(spec.min_size, spec.max_size)
            half = size / 2
            cx = rng.uniform(half + 1, w - half - 1)
            cy = rng.uniform(half + 1, h - half - 1)
            m = _shape_mask(shape, cx, cy, size, h, w)
            if not m.any():
                continue
            trial = owner.copy()
            trial[m] = len(things)
            # reject placements that hide more than half of an earlier thing
            if all((trial == k).sum() * 2 >= area for k, (_, area) in enumerate(things)):
                owner = trial
                things.append((cls, int(m.sum())))
                pixels[m] = rgb
                break

    noise = rng.normal(0.0, spec.noise, size=pixels.shape) if spec.noise > 0 else 0.0
    pixels = np.clip(pixels + noise, 0.0, 1.0).astype(np.float32)

    instances = []
    for k, (cls, _) in enumerate(things):
        m = owner == k
        mask = Mask(m)
        instances.append(Instance(bbox=mask.tight_box(), mask=mask, class_id=cls, kind="thing"))
    for k, _name in enumerate(spec.stuff_classes):
        m = (band == k) & (owner < 0)
        if not m.any():
            continue
        mask = Mask(m)
        instances.append(Instance(bbox=mask.tight_box(), mask=mask, class_id=n_thing_cls + k, kind="stuff"))
    return AnnotatedImage(
        id=f"{spec.id_prefix}{spec.seed}-{index:05d}",
        height=h,
        width=w,
        pixels=pixels,
        instances=tuple(instances),
    )


def generate(spec: SynthSpec, start: int = 0) -> DatasetSplit:
    """Generate ``spec.num_images`` labeled images, indices ``start, start+1, ...``.

    Each image draws from its own stream keyed by ``(seed, index)``, so any
    subset can be regenerated independently.
    """
    images = [generate_image(spec, start + i) for i in range(spec.num_images)]
    return DatasetSplit(role="labeled", images=tuple(images), class_names=spec.class_names)


def derive_unlabeled(split: DatasetSplit, suffix: str = "-u") -> DatasetSplit:
    """Strip every annotation; ids get ``suffix`` so they never collide with labeled ids."""
    if split.role != "labeled":
        raise ValidationError(f"derive_unlabeled expects a labeled split, got {split.role!r}")
    images = [
        AnnotatedImage(id=im.id + suffix, height=im.height, width=im.width, pixels=im.pixels, instances=())
        for im in split.images
    ]
    return DatasetSplit(role="unlabeled", images=tuple(images), class_names=None)

