"""End-to-end synthetic experiments built from the library pieces.

Defaults here are the desk-scale settings used by the acceptance suite and
the CLI: a 64x64 canvas, 32x32 patches, offsets fed in units of 8 pixels,
and SGD with momentum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import PairSample, SyntheticConfig, gen_synthetic, pair_directed, shape_template
from .data.synthetic import CLASS_ID
from .evaluation import (
    FeatureSet, accuracy, extract_features, fuse_features, map_score, normalized_cross_correlation,
    reconstruct_patch, train_linear_classifier,
)
from .model import (
    EncoderConfig, ScnModel, TrainingReport, ablate_offset, pretrain_reference_encoder, train,
)
from .rng import derive_seed
from .tensor import SgdConfig

log = logging.getLogger(__name__)


def pretrain_defaults() -> SgdConfig:
    return SgdConfig(base_lr=0.01, dropped_lr=0.001, lr_drop_epoch=15, momentum=0.9, max_epochs=20)


def feature_sgd_defaults() -> SgdConfig:
    return SgdConfig(base_lr=0.01, dropped_lr=0.001, lr_drop_epoch=75, momentum=0.9, max_epochs=100)


def raw_sgd_defaults() -> SgdConfig:
    return SgdConfig(base_lr=0.002, dropped_lr=0.0002, lr_drop_epoch=112, momentum=0.9, max_epochs=150)


@dataclass
class SyntheticExperiment:
    seed: int = 0
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: SgdConfig = field(default_factory=pretrain_defaults)
    feature_sgd: SgdConfig = field(default_factory=feature_sgd_defaults)
    raw_sgd: SgdConfig = field(default_factory=raw_sgd_defaults)
    offset_scale: float = 0.125
    tune_depth: str = "fc-only"
    d2: Optional[int] = None

    def sgd(self, base: SgdConfig, purpose: str) -> SgdConfig:
        cfg = SgdConfig(**base.to_dict())
        cfg.seed = derive_seed(self.seed, purpose)
        return cfg


@dataclass
class SyntheticData:
    train: list
    test: list
    manifest: object


def load_synthetic(exp: SyntheticExperiment) -> SyntheticData:
    _, manifest = gen_synthetic(exp.synthetic, derive_seed(exp.seed, "dataset"))
    size = exp.encoder.input_size
    return SyntheticData(
        pair_directed(manifest.split("train"), size),
        pair_directed(manifest.split("test"), size),
        manifest,
    )


def reference_patches(pairs: Sequence[PairSample], exclude=(CLASS_ID["black"],)) -> tuple[np.ndarray, np.ndarray]:
    """Labelled patches for pretraining; by default the three synthetic shapes, no black regions."""
    patches, labels = [], []
    for p in pairs:
        for patch, label in ((p.patch_j, p.label_j), (p.patch_i, p.label_i)):
            if label is not None and label not in exclude:
                patches.append(patch)
                labels.append(label)
    if not patches:
        raise ValueError("reference pretraining needs labelled patches")
    return np.stack(patches), np.asarray(labels)


def build_reference(exp: SyntheticExperiment, train_pairs: Sequence[PairSample], exclude=(CLASS_ID["black"],)):
    patches, labels = reference_patches(train_pairs, exclude)
    return pretrain_reference_encoder(exp.encoder, patches, labels, exp.sgd(exp.pretrain, "pretrain"))


def new_model(exp: SyntheticExperiment, reference, mode: str = "feature", ablated: bool = False) -> ScnModel:
    model = ScnModel.from_reference(reference, mode=mode, tune_depth=exp.tune_depth, d2=exp.d2,
                                    seed=derive_seed(exp.seed, "context-init"), offset_scale=exp.offset_scale)
    return ablate_offset(model) if ablated else model


@dataclass
class AblationResult:
    with_offset: TrainingReport
    ablated: TrainingReport
    model: ScnModel
    ablated_model: ScnModel

    @property
    def ratio(self) -> float:
        return self.with_offset.test_loss[-1] / self.ablated.test_loss[-1]


def run_offset_ablation(exp: SyntheticExperiment, data: SyntheticData, reference) -> AblationResult:
    sgd = exp.sgd(exp.feature_sgd, "scn-train")
    full = new_model(exp, reference)
    rep_full = train(full, data.train, data.test, sgd)
    abl = new_model(exp, reference, ablated=True)
    rep_abl = train(abl, data.train, data.test, sgd)
    return AblationResult(rep_full, rep_abl, full, abl)


@dataclass
class ClassificationResult:
    majority_baseline: float
    h3_accuracy: float
    h1_accuracy: float
    fused_accuracy: float
    h3_map: float
    h1_map: float
    fused_map: float


def target_pairs(pairs: Sequence[PairSample]) -> list:
    return [p for p in pairs if p.label_i is not None]


def run_classification(model: ScnModel, train_pairs, test_pairs, reg: float = 1e-4, epochs: int = 100,
                       seed: int = 0) -> ClassificationResult:
    """Classify target patches from predicted (h3), own (h1) and fused features."""
    tr, te = target_pairs(train_pairs), target_pairs(test_pairs)
    sets = {}
    for which in ("h1", "h3"):
        sets[which] = (extract_features(model, tr, which), extract_features(model, te, which))
    fused = (
        fuse_features(sets["h1"][0], sets["h3"][0]),
        fuse_features(sets["h1"][1], sets["h3"][1], sets["h1"][0], sets["h3"][0]),
    )
    sets["fused"] = fused
    scores = {}
    for key, (a, b) in sets.items():
        clf = train_linear_classifier(a, reg, epochs, seed)
        scores[key] = (accuracy(clf, b), map_score(clf, b))
    counts = np.bincount(sets["h1"][1].labels)
    return ClassificationResult(
        majority_baseline=float(counts.max() / counts.sum()),
        h3_accuracy=scores["h3"][0], h1_accuracy=scores["h1"][0], fused_accuracy=scores["fused"][0],
        h3_map=scores["h3"][1], h1_map=scores["h1"][1], fused_map=scores["fused"][1],
    )


@dataclass
class ReconstructionResult:
    square_hit_rate: float  # horizontal offsets decoded closer to the square template
    triangle_hit_rate: float  # vertical offsets decoded closer to the triangle template
    offaxis_mean_intensity: list
    report: TrainingReport

    @property
    def offaxis_max(self) -> float:
        return max(self.offaxis_mean_intensity)


def score_reconstructions(model: ScnModel, test_pairs, margin: float) -> tuple:
    """Hit rates per partner kind (None when a kind is absent) and off-axis mean intensities."""
    size = model.config.input_size
    square = shape_template("square", size, margin)
    triangle = shape_template("triangle", size, margin)
    hits = {CLASS_ID["square"]: [], CLASS_ID["triangle"]: []}
    dark = []
    for p in test_pairs:
        img = reconstruct_patch(model, p.patch_j, p.offset).astype(np.float64) / 255.0
        if p.label_i == CLASS_ID["black"]:
            dark.append(float(img.mean()))
            continue
        closer_square = normalized_cross_correlation(img, square) > normalized_cross_correlation(img, triangle)
        hits[p.label_i].append(closer_square == (p.label_i == CLASS_ID["square"]))
    def rate(v):
        return float(np.mean(v)) if v else None

    return rate(hits[CLASS_ID["square"]]), rate(hits[CLASS_ID["triangle"]]), dark


def run_reconstruction(exp: SyntheticExperiment, data: SyntheticData, reference) -> ReconstructionResult:
    model = new_model(exp, reference, mode="raw-pixel")
    report = train(model, data.train, data.test, exp.sgd(exp.raw_sgd, "raw-train"))
    sq, tri, dark = score_reconstructions(model, data.test, exp.synthetic.crop_margin)
    return ReconstructionResult(sq, tri, dark, report)


def feature_sets_for(model: ScnModel, pairs, which: str, provenance: dict) -> FeatureSet:
    return extract_features(model, target_pairs(pairs), which, provenance)
