"""Downstream evaluation of learned and predicted features.

Features are classified with a one-vs-rest linear model under an
L2-regularized squared hinge loss, scored by accuracy and by mAP with
all-points interpolated precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import envelope
from .data import pnm
from .data.patches import PairSample
from .model import ScnModel, context_predict, encode

FEATURESET_KIND = "scn-featureset"
SOURCES = ("h1", "h3", "fused")


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    source: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be an N x D matrix")
        if len(self.labels) != len(self.features):
            raise ValueError(f"{len(self.labels)} labels for {len(self.features)} rows")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def save(self, path) -> None:
        header = {
            "kind": FEATURESET_KIND,
            "N": self.n,
            "D": self.dim,
            "source": self.source,
            "provenance": self.provenance,
            "labels": self.labels.tolist(),
        }
        envelope.write(path, header, {"features": self.features})

    @classmethod
    def load(cls, path) -> "FeatureSet":
        header, tensors = envelope.read(path, kind=FEATURESET_KIND)
        feats = tensors["features"]
        if feats.shape != (header["N"], header["D"]):
            raise envelope.EnvelopeError("feature payload shape disagrees with header")
        return cls(feats, np.array(header["labels"], dtype=np.int64), header["source"], header["provenance"])


def extract_features(model: ScnModel, pairs: Sequence[PairSample], which: str = "h1",
                     provenance: Optional[dict] = None) -> FeatureSet:
    """Per-pair features of the target patch, labelled with its class.

    ``h1``: bottom-stream encoding of the target patch itself.
    ``h3``: the context module's prediction from the context patch and offset.
    """
    if which not in ("h1", "h3"):
        raise ValueError("which must be 'h1' or 'h3'")
    if not pairs:
        raise ValueError("no pairs to extract features from")
    labels = [p.label_i if p.label_i is not None else -1 for p in pairs]
    if which == "h1":
        feats = encode(model, np.stack([p.patch_i for p in pairs]), "bottom")
    else:
        if any(p.offset is None for p in pairs):
            raise ValueError("h3 extraction needs an offset for every pair")
        h1 = encode(model, np.stack([p.patch_j for p in pairs]), "bottom")
        feats = context_predict(model, h1, np.stack([p.offset for p in pairs]))
    return FeatureSet(feats, labels, which, dict(provenance or {}))


# ------------------------------------------------------------- classifier


@dataclass
class LinearClassifier:
    W: np.ndarray  # (C, D)
    b: np.ndarray  # (C,)
    classes: np.ndarray  # label value for each row of W
    reg: float
    provenance: dict = field(default_factory=dict)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.W.shape[1]:
            raise ValueError(f"expected {self.W.shape[1]}-dimensional features, got {X.shape}")
        return X @ self.W.T + self.b

    def predict(self, X: np.ndarray) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lowest class id
        return self.classes[np.argmax(self.decision_function(X), axis=1)]


def train_linear_classifier(train: FeatureSet, reg: float = 1e-4, epochs: int = 100,
                            seed: int = 0) -> LinearClassifier:
    """One-vs-rest squared hinge with L2, minimized by full-batch Nesterov descent.

    The objective per class is ``mean_n max(0, 1 - y_n s_n)^2 + reg * |w|^2``.
    Full-batch steps make the result independent of row order and of row
    duplication; ``seed`` is recorded for provenance only.
    """
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise ValueError("need at least two classes to train a classifier")
    X = np.hstack([train.features.astype(np.float64), np.ones((train.n, 1))])
    Y = np.where(train.labels[:, None] == classes[None, :], 1.0, -1.0)
    n = train.n
    lipschitz = 2.0 * np.linalg.norm(X, 2) ** 2 / n + 2.0 * reg
    step = 1.0 / lipschitz
    mask = np.ones(X.shape[1])
    mask[-1] = 0.0  # bias is not regularized

    def grad(Wa):
        margin = 1.0 - Y * (X @ Wa.T)
        active = np.maximum(margin, 0.0)
        return (-2.0 / n) * (active * Y).T @ X + 2.0 * reg * Wa * mask

    Wa = np.zeros((len(classes), X.shape[1]))
    prev = Wa
    for t in range(1, epochs + 1):
        look = Wa + (t - 1) / (t + 2) * (Wa - prev)
        prev = Wa
        Wa = look - step * grad(look)
    return LinearClassifier(Wa[:, :-1], Wa[:, -1], classes, reg, {"seed": seed, **train.provenance})


def accuracy(clf: LinearClassifier, test: FeatureSet) -> float:
    return float(np.mean(clf.predict(test.features) == test.labels))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Area under the all-points interpolated precision-recall curve."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / n_pos
    # interpolated precision: best precision at any recall >= r
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * interp))


def map_score(clf: LinearClassifier, test: FeatureSet) -> float:
    """Mean AP over the classifier's classes that occur in ``test``."""
    scores = clf.decision_function(test.features)
    aps = [
        average_precision(scores[:, k], test.labels == c)
        for k, c in enumerate(clf.classes)
        if np.any(test.labels == c)
    ]
    return float(np.mean(aps))


# ----------------------------------------------------------------- fusion


def standardize_stats(fs: FeatureSet) -> tuple[np.ndarray, np.ndarray]:
    mean = fs.features.astype(np.float64).mean(axis=0)
    std = fs.features.astype(np.float64).std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def fuse_features(a: FeatureSet, b: FeatureSet, train_a: Optional[FeatureSet] = None,
                  train_b: Optional[FeatureSet] = None, standardize: bool = True) -> FeatureSet:
    """Row-wise concatenation ``[a | b]``.

    With ``standardize`` each half is shifted and scaled by statistics of the
    corresponding training set (``a``/``b`` themselves when none is given).
    """
    if a.n != b.n or not np.array_equal(a.labels, b.labels):
        raise ValueError("feature sets are not row-aligned")
    halves = []
    for part, ref in ((a, train_a or a), (b, train_b or b)):
        if standardize:
            mean, std = standardize_stats(ref)
            halves.append(((part.features - mean) / std).astype(np.float32))
        else:
            halves.append(part.features)
    prov = {"a": a.provenance, "b": b.provenance, "standardized": standardize}
    return FeatureSet(np.hstack(halves), a.labels, "fused", prov)


# --------------------------------------------------------- reconstruction


def reconstruct_patch(model: ScnModel, context_patch: np.ndarray, offset: np.ndarray,
                      path=None) -> np.ndarray:
    """Decode a raw-pixel prediction to an 8-bit image; optionally write PGM/PPM."""
    if model.mode != "raw-pixel":
        raise ValueError("reconstruction needs a model trained in raw-pixel mode")
    cfg = model.config
    h1 = encode(model, context_patch, "bottom")
    h3 = context_predict(model, h1, offset)
    img = h3.reshape(cfg.channels, cfg.input_size, cfg.input_size)
    img = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    img = img[0] if cfg.channels == 1 else img.transpose(1, 2, 0)
    if path is not None:
        pnm.write_image(Path(path), img)
    return img


def normalized_cross_correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom > 0 else 0.0
