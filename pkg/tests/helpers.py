"""Shared builders for randomized test data."""

from __future__ import annotations

import numpy as np

from agnostic_ssl.datamodel import AnnotatedImage, BBox, DatasetSplit, Instance, Mask


def box_mask(h: int, w: int, x1: int, y1: int, x2: int, y2: int) -> Mask:
    m = np.zeros((h, w), dtype=bool)
    m[y1:y2, x1:x2] = True
    return Mask(m)


def random_blob(rng: np.random.Generator, h: int, w: int) -> Mask:
    """A random non-empty mask (a box with some pixels knocked out, tight box kept)."""
    x1, x2 = sorted(rng.choice(w + 1, size=2, replace=False))
    y1, y2 = sorted(rng.choice(h + 1, size=2, replace=False))
    m = np.zeros((h, w), dtype=bool)
    m[y1:y2, x1:x2] = rng.uniform(size=(y2 - y1, x2 - x1)) < 0.8
    # keep the four extreme rows/cols occupied so the tight box is the drawn box
    m[y1, x1:x2] = True
    m[y2 - 1, x1:x2] = True
    m[y1:y2, x1] = True
    m[y1:y2, x2 - 1] = True
    return Mask(m)


def random_instance(rng: np.random.Generator, h: int, w: int, scored: bool = False, classes: int = 3,
                    agnostic: bool = False) -> Instance:
    mask = random_blob(rng, h, w)
    return Instance(
        bbox=mask.tight_box(),
        mask=mask,
        class_id=None if agnostic else int(rng.integers(classes)),
        score=float(rng.uniform()) if scored else None,
        kind="stuff" if rng.uniform() < 0.2 else "thing",
    )


def random_split(rng: np.random.Generator, n: int, role: str = "labeled", h: int = 24, w: int = 20,
                 pixels: bool = True) -> DatasetSplit:
    images = []
    for i in range(n):
        k = 0 if role == "unlabeled" else int(rng.integers(1 if role == "pseudo" else 0, 5))
        inst = tuple(random_instance(rng, h, w, scored=role == "pseudo", agnostic=role == "pseudo") for _ in range(k))
        px = rng.uniform(size=(h, w, 3)).astype(np.float32) if pixels else None
        images.append(AnnotatedImage(id=f"img{i:03d}", height=h, width=w, pixels=px, instances=inst))
    names = None if role != "labeled" else ("a", "b", "c")
    return DatasetSplit(role=role, images=tuple(images), class_names=names)


def box(x1, y1, x2, y2) -> BBox:
    return BBox(float(x1), float(y1), float(x2), float(y2))
