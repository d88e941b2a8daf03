"""Cropping boxes out of images and building training pairs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..rng import derive_rng
from .boxes import BoundingBox, compute_offset
from .manifest import Manifest


@dataclass
class PairSample:
    """Target box/patch ``i`` (top stream) and context box/patch ``j`` (bottom stream)."""

    image_id: str
    box_i: BoundingBox
    box_j: BoundingBox
    patch_i: np.ndarray
    patch_j: np.ndarray
    offset: np.ndarray
    label_i: Optional[int] = None
    label_j: Optional[int] = None


def _axis_coords(start: float, stop: float, out: int, limit: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # sample at output pixel centers mapped into source pixel-index space
    step = (stop - start) / out
    pos = start + (np.arange(out) + 0.5) * step - 0.5
    pos = np.clip(pos, 0.0, limit - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, limit - 1)
    return lo, hi, pos - lo


def crop_resize(image: np.ndarray, box: BoundingBox, out_size: int) -> np.ndarray:
    """Bilinear crop of ``box`` to ``(C, out_size, out_size)`` float32 in [0, 1].

    Sample points falling outside the image are clamped to its border.
    """
    if out_size < 8:
        raise ValueError("out_size must be at least 8")
    img = np.asarray(image)
    h, w = img.shape[:2]
    x0, y0, x1, y1 = box.xyxy
    if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
        raise ValueError(f"box {box.xyxy} lies outside the {w}x{h} image")
    chw = img[None] if img.ndim == 2 else img.transpose(2, 0, 1)
    src = chw.astype(np.float64) / 255.0
    ylo, yhi, fy = _axis_coords(y0, y1, out_size, h)
    xlo, xhi, fx = _axis_coords(x0, x1, out_size, w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = src[:, ylo][:, :, xlo] * (1 - fx) + src[:, ylo][:, :, xhi] * fx
    bot = src[:, yhi][:, :, xlo] * (1 - fx) + src[:, yhi][:, :, xhi] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def _make_pair(image, image_id, boxes, labels, i, j, size, margin) -> PairSample:
    return PairSample(
        image_id=image_id,
        box_i=boxes[i],
        box_j=boxes[j],
        patch_i=crop_resize(image, boxes[i].expand(margin), size),
        patch_j=crop_resize(image, boxes[j].expand(margin), size),
        offset=compute_offset(boxes[i], boxes[j]),
        label_i=None if labels is None else labels[i],
        label_j=None if labels is None else labels[j],
    )


def pair_from_boxes(manifest: Manifest, patch_size: int = 32, margin: Optional[float] = None) -> list[PairSample]:
    """All ordered within-image pairs (i, j), i != j, in manifest order."""
    out = []
    for r in manifest:
        boxes = manifest.boxes(r)
        if len(boxes) < 2:
            continue
        image = manifest.load_image(r)
        m = r.get("crop_margin", 0.0) if margin is None else margin
        for i in range(len(boxes)):
            for j in range(len(boxes)):
                if i != j:
                    out.append(_make_pair(image, r["image_id"], boxes, r.get("labels"), i, j, patch_size, m))
    return out


def pair_directed(manifest: Manifest, patch_size: int = 32, margin: Optional[float] = None) -> list[PairSample]:
    """Pairs listed in each record's ``pairs`` field as (context, target) indices."""
    out = []
    for r in manifest:
        boxes = manifest.boxes(r)
        image = manifest.load_image(r)
        m = r.get("crop_margin", 0.0) if margin is None else margin
        for j, i in r.get("pairs", []):
            out.append(_make_pair(image, r["image_id"], boxes, r.get("labels"), i, j, patch_size, m))
    return out


def random_boxes(width: int, height: int, n_patches: int, patch_side: int, seed: int, *purpose) -> list[BoundingBox]:
    if width <= patch_side or height <= patch_side:
        raise ValueError(f"image {width}x{height} too small for {patch_side}px patches")
    rng = derive_rng(seed, "random-patches", *purpose)
    xs = rng.integers(0, width - patch_side + 1, size=n_patches)
    ys = rng.integers(0, height - patch_side + 1, size=n_patches)
    return [BoundingBox.from_xywh(int(x), int(y), patch_side, patch_side) for x, y in zip(xs, ys)]


def pair_random(image: np.ndarray, n_patches: int = 5, patch_side: int = 64, seed: int = 0,
                image_id: str = "", out_size: int = 32) -> list[PairSample]:
    """``n_patches`` uniformly placed square crops, one ordered pair per unordered pair."""
    h, w = np.asarray(image).shape[:2]
    boxes = random_boxes(w, h, n_patches, patch_side, seed, image_id)
    return [
        _make_pair(image, image_id, boxes, None, i, j, out_size, 0.0)
        for j in range(n_patches)
        for i in range(j + 1, n_patches)
    ]


def make_pairs(manifest: Manifest, strategy: str = "bbox", patch_size: int = 32, seed: int = 0,
               n_patches: int = 5, patch_side: int = 64) -> list[PairSample]:
    if strategy == "bbox":
        return pair_from_boxes(manifest, patch_size)
    if strategy == "directed":
        return pair_directed(manifest, patch_size)
    if strategy == "random":
        out = []
        for r in manifest:
            out += pair_random(manifest.load_image(r), n_patches, patch_side, seed, r["image_id"], patch_size)
        return out
    raise ValueError(f"unknown pairing strategy {strategy!r}")
