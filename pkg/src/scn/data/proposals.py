"""Ingesting externally generated object proposals.

Input is JSON lines, one proposal per line::

    {"image_id": "000012", "x": 10.0, "y": 4.5, "w": 40.0, "h": 32.0, "confidence": 0.83}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .boxes import BoundingBox
from .manifest import Manifest

DEFAULT_MIN_CONFIDENCE = 0.1
DEFAULT_ASPECT_BOUNDS = (1 / 3, 3.0)


class ProposalFormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class Proposal:
    image_id: str
    box: BoundingBox
    confidence: float
    clamped: bool = False


def parse_proposals(lines, image_sizes: Optional[dict] = None) -> list[Proposal]:
    """Parse proposal lines; boxes reaching outside a known image are clamped and flagged."""
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            iid = str(rec["image_id"])
            x, y, w, h, conf = (float(rec[k]) for k in ("x", "y", "w", "h", "confidence"))
            box = BoundingBox.from_xywh(x, y, w, h)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ProposalFormatError(lineno, str(e)) from None
        clamped = False
        if image_sizes is not None and iid in image_sizes:
            width, height = image_sizes[iid]
            if not box.inside(width, height):
                try:
                    box = box.clamp(width, height)
                except ValueError:
                    raise ProposalFormatError(lineno, "box lies entirely outside its image") from None
                clamped = True
        out.append(Proposal(iid, box, conf, clamped))
    return out


def filter_proposals(proposals, min_confidence: float = DEFAULT_MIN_CONFIDENCE,
                     aspect_bounds: tuple = DEFAULT_ASPECT_BOUNDS) -> list[Proposal]:
    """Keep confident, regularly shaped boxes; source order is preserved."""
    lo, hi = aspect_bounds
    return [p for p in proposals if p.confidence >= min_confidence and lo <= p.box.aspect <= hi]


def ingest_proposals(path, min_confidence: float = DEFAULT_MIN_CONFIDENCE,
                     aspect_bounds: tuple = DEFAULT_ASPECT_BOUNDS,
                     image_sizes: Optional[dict] = None) -> list[Proposal]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return filter_proposals(parse_proposals(lines, image_sizes), min_confidence, aspect_bounds)


def apply_proposals(manifest: Manifest, proposals, min_confidence: float = DEFAULT_MIN_CONFIDENCE,
                    aspect_bounds: tuple = DEFAULT_ASPECT_BOUNDS) -> Manifest:
    """Replace each record's boxes with its proposals (labels dropped, provenance=proposal)."""
    by_image: dict[str, list[Proposal]] = {}
    for p in proposals:
        by_image.setdefault(p.image_id, []).append(p)
    records = []
    for r in manifest:
        props = by_image.get(r["image_id"], [])
        rec = {k: v for k, v in r.items() if k not in ("pairs", "labels", "synthetic")}
        rec.update(
            boxes=[list(p.box.xyxy) for p in props],
            labels=None,
            provenance="proposal",
            confidence=[p.confidence for p in props],
            flags=["clamped" if p.clamped else "" for p in props],
            proposal_filter={"min_confidence": min_confidence, "aspect_bounds": list(aspect_bounds)},
        )
        records.append(rec)
    return Manifest(records, manifest.root, manifest.images)
