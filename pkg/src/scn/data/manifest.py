"""JSON-lines dataset manifests: one record per image.

A record looks like::

    {"image_id": "000012", "image": "images/000012.pgm",
     "boxes": [[x0, y0, x1, y1], ...], "labels": [0, 1] | null,
     "split": "train" | "test", "provenance": "bbox" | "random" | "proposal",
     ...optional keys: "pairs", "crop_margin", "synthetic", "flags", "confidence"}

``pairs`` lists directed (context index, target index) pairs when the record
prescribes them. Image paths are relative to the manifest file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..envelope import crc64
from . import pnm
from .boxes import BoundingBox

SPLITS = ("train", "test")
PROVENANCES = ("bbox", "random", "proposal")


class ManifestError(ValueError):
    pass


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    root: Optional[Path] = None
    images: dict = field(default_factory=dict, repr=False)  # image_id -> decoded array cache

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def validate(self) -> None:
        seen = set()
        for r in self.records:
            iid = r["image_id"]
            if iid in seen:
                raise ManifestError(f"duplicate image_id {iid!r}")
            seen.add(iid)
            if r.get("split") not in SPLITS:
                raise ManifestError(f"{iid}: split must be one of {SPLITS}")
            if r.get("provenance") not in PROVENANCES:
                raise ManifestError(f"{iid}: provenance must be one of {PROVENANCES}")
            labels = r.get("labels")
            if labels is not None and len(labels) != len(r["boxes"]):
                raise ManifestError(f"{iid}: {len(labels)} labels for {len(r['boxes'])} boxes")
            for box in r["boxes"]:
                BoundingBox.from_xyxy(*box)

    def split(self, name: str) -> "Manifest":
        return Manifest([r for r in self.records if r["split"] == name], self.root, self.images)

    def boxes(self, record: dict) -> list[BoundingBox]:
        return [BoundingBox.from_xyxy(*b) for b in record["boxes"]]

    def load_image(self, record: dict) -> np.ndarray:
        iid = record["image_id"]
        if iid not in self.images:
            if self.root is None:
                raise ManifestError(f"no root directory to resolve {record['image']!r}")
            self.images[iid] = pnm.read_image(self.root / record["image"])
        return self.images[iid]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":"), sort_keys=True) + "\n" for r in self.records)

    @property
    def manifest_id(self) -> str:
        return f"{crc64(self.to_jsonl().encode('utf-8')):016x}"

    def write(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        self.root = path.parent

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        records = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: {e.msg}") from None
        m = cls(records, path.parent)
        m.validate()
        return m

    def write_images(self, out_dir) -> None:
        """Store every cached image at its record's relative path under ``out_dir``."""
        out_dir = Path(out_dir)
        for r in self.records:
            dest = out_dir / r["image"]
            dest.parent.mkdir(parents=True, exist_ok=True)
            pnm.write_image(dest, self.images[r["image_id"]])
