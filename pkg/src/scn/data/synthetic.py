"""Synthetic circles / squares / triangles layouts.

Every image is a black canvas with a circle and one partner:

* ``square``: beside the circle (left or right), centers within
  ``axis_tolerance`` pixels vertically;
* ``triangle``: above or below the circle, centers within ``axis_tolerance``
  pixels horizontally;
* ``black``: an empty region placed off both axes.

The circle is the context (bottom stream) and the partner the target.
Shapes are filled at full intensity with no anti-aliasing.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from ..rng import derive_rng
from .boxes import BoundingBox
from .manifest import Manifest

CLASSES = ("circle", "square", "triangle", "black")
CLASS_ID = {name: i for i, name in enumerate(CLASSES)}
PARTNER_AXIS = {"square": "horizontal", "triangle": "vertical", "black": "off-axis"}


class GenerationError(RuntimeError):
    pass


@dataclass
class SyntheticConfig:
    canvas: int = 64
    n_square: int = 300
    n_triangle: int = 300
    n_black: int = 200
    n_test: int = 200
    size_min: int = 8  # half-extent (radius / half side) in pixels
    size_max: int = 16
    axis_tolerance: Optional[float] = None  # default: 30 px at 224 scaled to the canvas
    offaxis_factor: float = 2.0  # black regions sit this many tolerances off each axis
    min_gap: int = 6
    crop_margin: float = 0.15
    max_retries: int = 10000

    def __post_init__(self):
        for name in ("canvas", "n_square", "n_triangle", "n_black", "size_min", "size_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.n_test < self.total:
            raise ValueError("n_test must be positive and smaller than the pair count")
        if self.size_min > self.size_max:
            raise ValueError("size_min exceeds size_max")

    @property
    def total(self) -> int:
        return self.n_square + self.n_triangle + self.n_black

    @property
    def tolerance(self) -> float:
        return self.axis_tolerance if self.axis_tolerance is not None else 30.0 * self.canvas / 224.0

    def to_dict(self) -> dict:
        return asdict(self)


def render(canvas: np.ndarray, kind: str, cx: int, cy: int, s: int) -> None:
    """Fill shape ``kind`` of half-extent ``s`` centered at (cx, cy), in place."""
    if kind == "black":
        return
    h, w = canvas.shape
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs + 0.5, ys + 0.5
    if kind == "circle":
        mask = (px - cx) ** 2 + (py - cy) ** 2 <= s * s
    elif kind == "square":
        mask = (np.abs(px - cx) <= s) & (np.abs(py - cy) <= s)
    elif kind == "triangle":
        # apex at the top center, base along the bottom edge
        depth = py - (cy - s)
        mask = (depth >= 0) & (py <= cy + s) & (np.abs(px - cx) <= depth / 2)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    canvas[mask] = 255


def shape_template(kind: str, size: int, margin: float, half: int = 12) -> np.ndarray:
    """Canonical patch of a centered shape cropped with ``margin``; (1, size, size) in [0, 1]."""
    from .patches import crop_resize

    side = 4 * half
    canvas = np.zeros((side, side), dtype=np.uint8)
    c = side // 2
    render(canvas, kind, c, c, half)
    box = BoundingBox.from_xyxy(c - half, c - half, c + half, c + half).expand(margin)
    return crop_resize(canvas, box, size)


def _box(cx, cy, s) -> tuple:
    return (cx - s, cy - s, cx + s, cy + s)


def _separated(a, b, gap) -> bool:
    return a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1]


def _sample_layout(kind: str, cfg: SyntheticConfig, rng: np.random.Generator) -> Optional[tuple]:
    n = cfg.canvas
    r = int(rng.integers(cfg.size_min, cfg.size_max + 1))
    s = int(rng.integers(cfg.size_min, cfg.size_max + 1))
    tol = cfg.tolerance
    cx = int(rng.integers(r, n - r + 1))
    cy = int(rng.integers(r, n - r + 1))
    if kind in ("square", "triangle"):
        sign = 1 if rng.integers(2) else -1
        along = sign * int(rng.integers(r + s + cfg.min_gap, n))
        across = int(rng.integers(-int(tol), int(tol) + 1))
        px, py = (cx + along, cy + across) if kind == "square" else (cx + across, cy + along)
    else:
        px = int(rng.integers(s, n - s + 1))
        py = int(rng.integers(s, n - s + 1))
        lim = cfg.offaxis_factor * tol
        if abs(px - cx) <= lim or abs(py - cy) <= lim:
            return None
    circle, other = _box(cx, cy, r), _box(px, py, s)
    if min(other) < 0 or max(other) > n:
        return None
    if not _separated(circle, other, cfg.min_gap):
        return None
    return (cx, cy, r), (px, py, s)


def gen_synthetic(cfg: Optional[SyntheticConfig] = None, seed: int = 0) -> tuple[list[np.ndarray], Manifest]:
    """Render the dataset; returns images (uint8 HxW) and a manifest caching them."""
    cfg = cfg or SyntheticConfig()
    kinds = ["square"] * cfg.n_square + ["triangle"] * cfg.n_triangle + ["black"] * cfg.n_black
    test_idx = set(derive_rng(seed, "synthetic-split").permutation(cfg.total)[: cfg.n_test].tolist())
    images, records = [], []
    manifest = Manifest()
    for idx, kind in enumerate(kinds):
        rng = derive_rng(seed, "synthetic-layout", idx)
        for _ in range(cfg.max_retries):
            layout = _sample_layout(kind, cfg, rng)
            if layout is not None:
                break
        else:
            raise GenerationError(f"could not place pair {idx} ({kind}) within {cfg.max_retries} retries")
        (cx, cy, r), (px, py, s) = layout
        canvas = np.zeros((cfg.canvas, cfg.canvas), dtype=np.uint8)
        render(canvas, "circle", cx, cy, r)
        render(canvas, kind, px, py, s)
        image_id = f"{idx:06d}"
        records.append({
            "image_id": image_id,
            "image": f"images/{image_id}.pgm",
            "boxes": [list(map(float, _box(cx, cy, r))), list(map(float, _box(px, py, s)))],
            "labels": [CLASS_ID["circle"], CLASS_ID[kind]],
            "split": "test" if idx in test_idx else "train",
            "provenance": "bbox",
            "pairs": [[0, 1]],
            "crop_margin": cfg.crop_margin,
            "synthetic": {"partner": kind, "axis": PARTNER_AXIS[kind]},
        })
        images.append(canvas)
        manifest.images[image_id] = canvas
    manifest.records = records
    return images, manifest


def check_constraints(manifest: Manifest, cfg: SyntheticConfig) -> list[str]:
    """Re-derive every layout rule from a manifest; returns violation messages."""
    problems = []
    tol = cfg.tolerance
    for r in manifest:
        circle, other = manifest.boxes(r)
        (cx, cy), (px, py) = circle.center, other.center
        kind = r["synthetic"]["partner"]
        if kind == "square" and abs(cy - py) > tol:
            problems.append(f"{r['image_id']}: square off the horizontal axis by {abs(cy - py)}")
        if kind == "triangle" and abs(cx - px) > tol:
            problems.append(f"{r['image_id']}: triangle off the vertical axis by {abs(cx - px)}")
        if kind == "black" and (abs(cx - px) <= tol or abs(cy - py) <= tol):
            problems.append(f"{r['image_id']}: black region on an axis")
        for b in (circle, other):
            if not b.inside(cfg.canvas, cfg.canvas):
                problems.append(f"{r['image_id']}: box {b.xyxy} leaves the canvas")
    return problems
