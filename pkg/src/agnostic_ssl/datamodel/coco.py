"""COCO-style JSON codec for dataset splits.

Boxes are ``[x, y, w, h]`` in files and xyxy in memory. Masks are stored as
compressed RLE. Pixel grids, when present, live in a sibling ``.npz``
archive keyed by each image's ``file_name``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Union

import numpy as np

from . import rle
from .types import ROLES, AnnotatedImage, BBox, DatasetSplit, Instance, Mask, ValidationError

PathLike = Union[str, os.PathLike]


class CocoFormatError(ValidationError):
    pass


def pixels_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".npz")


def _rasterize_polygons(polys: list, height: int, width: int) -> np.ndarray:
    from matplotlib.path import Path as MplPath

    yy, xx = np.mgrid[0:height, 0:width]
    centers = np.column_stack([xx.ravel() + 0.5, yy.ravel() + 0.5])
    out = np.zeros(height * width, dtype=bool)
    for poly in polys:
        pts = np.asarray(poly, dtype=float).reshape(-1, 2)
        if len(pts) >= 3:
            out ^= MplPath(pts).contains_points(centers)
    return out.reshape(height, width)


def _annotation_to_instance(ann: dict, image: dict) -> Instance:
    image_id = image["id"]
    h, w = image["height"], image["width"]

    def bad(field: str, why: str) -> CocoFormatError:
        return CocoFormatError(f"image {image_id!r}, annotation {ann.get('id')!r}: field {field!r} {why}")

    box = ann.get("bbox")
    if not isinstance(box, list) or len(box) != 4:
        raise bad("bbox", "must be a list [x, y, w, h]")
    try:
        x, y, bw, bh = (float(v) for v in box)
    except (TypeError, ValueError):
        raise bad("bbox", "must hold numbers") from None
    if bw <= 0 or bh <= 0:
        raise bad("bbox", f"has non-positive size w={bw} h={bh}")
    try:
        bbox = BBox(x, y, x + bw, y + bh).clip(w, h)
    except ValidationError:
        raise bad("bbox", "lies outside the image") from None

    mask = None
    seg = ann.get("segmentation")
    if isinstance(seg, dict):
        try:
            data = rle.decode(seg)
        except (KeyError, ValueError, TypeError) as e:
            raise bad("segmentation", f"is not a valid RLE record ({e})") from None
        if data.shape != (h, w):
            raise bad("segmentation", f"size {list(data.shape)} differs from image {[h, w]}")
        mask = Mask(data)
    elif isinstance(seg, list) and seg:
        mask = Mask(_rasterize_polygons(seg, h, w))
    elif seg not in (None, []):
        raise bad("segmentation", "must be an RLE record or a polygon list")

    kind = ann.get("iskind", "thing")
    if kind not in ("thing", "stuff"):
        raise bad("iskind", f"must be 'thing' or 'stuff', got {kind!r}")
    try:
        return Instance(bbox=bbox, mask=mask, class_id=ann.get("category_id"), score=ann.get("score"), kind=kind)
    except ValidationError as e:
        raise bad("category_id/score", str(e)) from None


def read_coco_json(path: PathLike, load_pixels: bool = True) -> DatasetSplit:
    """Read a split; pixels are attached when the sibling archive exists."""
    path = Path(path)
    with path.open() as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise CocoFormatError(f"{path}: not valid JSON ({e})") from None
    for key in ("images", "annotations"):
        if not isinstance(doc.get(key), list):
            raise CocoFormatError(f"{path}: top-level {key!r} must be a list")

    archive = None
    if load_pixels and pixels_path(path).exists():
        archive = np.load(pixels_path(path))

    images: dict[Any, dict] = {}
    for rec in doc["images"]:
        for field in ("id", "width", "height"):
            if field not in rec:
                raise CocoFormatError(f"image {rec.get('id')!r}: missing field {field!r}")
        if rec["id"] in images:
            raise CocoFormatError(f"image {rec['id']!r}: duplicate id")
        images[rec["id"]] = rec

    per_image: dict[Any, list[Instance]] = {k: [] for k in images}
    for ann in doc["annotations"]:
        img_id = ann.get("image_id")
        if img_id not in images:
            raise CocoFormatError(f"image {img_id!r}: field 'image_id' of annotation {ann.get('id')!r} is unknown")
        per_image[img_id].append(_annotation_to_instance(ann, images[img_id]))

    out = []
    for img_id, rec in images.items():
        pixels = None
        if archive is not None:
            key = rec.get("file_name", str(img_id))
            if key in archive.files:
                pixels = archive[key]
        out.append(
            AnnotatedImage(
                id=str(img_id),
                height=int(rec["height"]),
                width=int(rec["width"]),
                pixels=pixels,
                instances=tuple(per_image[img_id]),
            )
        )

    cats = doc.get("categories") or []
    class_names = None
    if cats:
        ordered = sorted(cats, key=lambda c: c["id"])
        if [c["id"] for c in ordered] != list(range(len(ordered))):
            raise CocoFormatError(f"{path}: category ids must be 0..{len(ordered) - 1}")
        class_names = tuple(c["name"] for c in ordered)

    role = (doc.get("info") or {}).get("role")
    if role is None:
        role = "pseudo" if any("score" in a for a in doc["annotations"]) else "labeled"
    if role not in ROLES:
        raise CocoFormatError(f"{path}: unknown role {role!r}")
    return DatasetSplit(role=role, images=tuple(out), class_names=class_names)


def split_to_dict(split: DatasetSplit) -> dict:
    images = []
    annotations = []
    ann_id = 1
    for im in split.images:
        images.append({"id": im.id, "width": im.width, "height": im.height, "file_name": im.id})
        for inst in im.instances:
            ann: dict[str, Any] = {
                "id": ann_id,
                "image_id": im.id,
                "bbox": inst.bbox.to_xywh(),
                "area": inst.area,
                "iskind": inst.kind,
            }
            if inst.mask is not None:
                ann["segmentation"] = inst.mask.to_rle()
            if inst.class_id is not None:
                ann["category_id"] = inst.class_id
            if inst.score is not None:
                ann["score"] = inst.score
            annotations.append(ann)
            ann_id += 1
    cats = [{"id": i, "name": n} for i, n in enumerate(split.class_names or ())]
    return {"info": {"role": split.role}, "images": images, "annotations": annotations, "categories": cats}


def write_coco_json(split: DatasetSplit, path: PathLike, write_pixels: bool = True) -> None:
    """Write ``split`` to ``path``; output bytes depend only on the split."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(split_to_dict(split), separators=(",", ":"))
    path.write_text(text)
    if write_pixels and any(im.pixels is not None for im in split.images):
        arrays = {im.id: im.pixels for im in split.images if im.pixels is not None}
        with pixels_path(path).open("wb") as f:
            np.savez_compressed(f, **arrays)
