"""Command-line entry point: ``scn <command> --seed N --out DIR [--config run.json]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (divergence, non-finite values, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, model_digest, save_checkpoint
from .data import Manifest, SyntheticConfig, gen_synthetic, ingest_proposals, make_pairs
from .data.manifest import ManifestError
from .data.pnm import ImageFormatError
from .data.proposals import ProposalFormatError, apply_proposals
from .data.synthetic import CLASS_ID, GenerationError
from .envelope import EnvelopeError
from .evaluation import (
    FeatureSet, accuracy, extract_features, fuse_features, map_score, reconstruct_patch, train_linear_classifier,
)
from .experiments import (
    SyntheticExperiment, build_reference, feature_sgd_defaults, pretrain_defaults, raw_sgd_defaults,
    score_reconstructions, target_pairs,
)
from .gradcheck import TOLERANCE, run_suite
from .model import MODES, TUNE_DEPTHS, DivergenceError, Encoder, EncoderConfig, ScnModel, ablate_offset, train
from .rng import derive_seed
from .tensor import SgdConfig

log = logging.getLogger("scn")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
PAIRINGS = ("directed", "bbox", "random")
REFERENCES = ("pretrain", "random")


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything one command needs. Loaded from JSON; command-line flags win."""

    seed: Optional[int] = None
    out: Optional[str] = None
    manifest: Optional[str] = None
    proposals: Optional[str] = None
    checkpoint: Optional[str] = None
    pairing: str = "directed"
    mode: str = "feature"
    tune_depth: str = "fc-only"
    d2: Optional[int] = None
    offset_scale: float = 0.125
    ablate_offset: bool = False
    reference: str = "pretrain"  # or "random", or a checkpoint whose top stream is reused
    encoder: dict = field(default_factory=lambda: EncoderConfig().to_dict())
    sgd: Optional[dict] = None  # None: per-mode default
    pretrain: dict = field(default_factory=lambda: pretrain_defaults().to_dict())
    synthetic: dict = field(default_factory=lambda: SyntheticConfig().to_dict())
    classifier: dict = field(default_factory=lambda: {"reg": 1e-4, "epochs": 100})
    gradcheck_instances: int = 20

    @classmethod
    def load(cls, path: Optional[str], overrides: dict) -> "RunConfig":
        data = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise UsageError(f"config file {path} does not exist") from None
            except json.JSONDecodeError as e:
                raise UsageError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
            if not isinstance(data, dict):
                raise UsageError(f"{path}: expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for section in ("encoder", "pretrain", "synthetic", "classifier"):
            if section in data:
                merged = getattr(cls(), section)
                merged.update(data[section])
                data[section] = merged
        data.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.seed is None:
            raise UsageError("a seed is required (--seed N or \"seed\" in the config)")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**63:
            raise UsageError("seed must be a nonnegative integer")
        if self.out is None:
            raise UsageError("an output directory is required (--out DIR)")
        for name, allowed in (("mode", MODES), ("tune_depth", TUNE_DEPTHS), ("pairing", PAIRINGS)):
            if getattr(self, name) not in allowed:
                raise UsageError(f"{name} must be one of {allowed}")
        if self.reference not in REFERENCES and not Path(self.reference).is_file():
            raise UsageError(f"reference must be one of {REFERENCES} or an existing checkpoint path")
        for name in ("manifest", "proposals", "checkpoint"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise UsageError(f"{name} {path} does not exist")
        # build the typed sections once so bad values fail before any work starts
        self.encoder_config()
        self.synthetic_config()
        self.sgd_config()
        self.pretrain_config()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**self.encoder)

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(**self.synthetic)

    def sgd_config(self) -> SgdConfig:
        if self.sgd is not None:
            base = (raw_sgd_defaults() if self.mode == "raw-pixel" else feature_sgd_defaults()).to_dict()
            base.update(self.sgd)
            return SgdConfig(**base)
        return raw_sgd_defaults() if self.mode == "raw-pixel" else feature_sgd_defaults()

    def pretrain_config(self) -> SgdConfig:
        return SgdConfig(**self.pretrain)

    def experiment(self) -> SyntheticExperiment:
        sgd = self.sgd_config()
        return SyntheticExperiment(
            seed=self.seed, synthetic=self.synthetic_config(), encoder=self.encoder_config(),
            pretrain=self.pretrain_config(), feature_sgd=sgd, raw_sgd=sgd,
            offset_scale=self.offset_scale, tune_depth=self.tune_depth, d2=self.d2,
        )

    def effective(self) -> dict:
        d = asdict(self)
        d["sgd"] = self.sgd_config().to_dict()
        return d


# ------------------------------------------------------------------ helpers


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _manifest(cfg: RunConfig) -> Manifest:
    if cfg.manifest is None:
        raise UsageError("this command needs a manifest (--manifest PATH)")
    m = Manifest.read(cfg.manifest)
    if cfg.proposals is not None:
        sizes = {r["image_id"]: m.load_image(r).shape[1::-1] for r in m}
        m = apply_proposals(m, ingest_proposals(cfg.proposals, image_sizes=sizes))
    return m


def _is_synthetic(m: Manifest) -> bool:
    return all("synthetic" in r for r in m)


def _pairs(cfg: RunConfig, m: Manifest, split: str) -> list:
    pairing = cfg.pairing
    if pairing == "directed" and not all("pairs" in r for r in m):
        pairing = "bbox"
    size = cfg.encoder_config().input_size
    return make_pairs(m.split(split), pairing, size, seed=derive_seed(cfg.seed, "pairing"))


def _build_model(cfg: RunConfig, train_pairs: list, synthetic: bool) -> ScnModel:
    exp = cfg.experiment()
    if cfg.reference == "pretrain":
        try:
            reference = build_reference(exp, train_pairs, exclude=(CLASS_ID["black"],) if synthetic else ())
        except ValueError as e:
            raise UsageError(f"{e}; set \"reference\" to \"random\" or a checkpoint path") from None
    elif cfg.reference == "random":
        reference = Encoder.init(exp.encoder, derive_seed(cfg.seed, "reference-init"))
    else:
        reference = load_checkpoint(cfg.reference).top
        if reference.config.to_dict() != exp.encoder.to_dict():
            raise UsageError("the reference checkpoint's encoder differs from the configured encoder")
    model = ScnModel.from_reference(reference, mode=cfg.mode, tune_depth=cfg.tune_depth, d2=cfg.d2,
                                    seed=derive_seed(cfg.seed, "context-init"), offset_scale=cfg.offset_scale)
    return ablate_offset(model) if cfg.ablate_offset else model


def _model_from_checkpoint(cfg: RunConfig) -> ScnModel:
    if cfg.checkpoint is None:
        raise UsageError("this command needs a checkpoint (--checkpoint PATH)")
    return load_checkpoint(cfg.checkpoint)


# ----------------------------------------------------------------- commands


def cmd_gen_synthetic(cfg: RunConfig) -> int:
    syn = cfg.synthetic_config()
    _, manifest = gen_synthetic(syn, derive_seed(cfg.seed, "dataset"))
    out = _out_dir(cfg)
    manifest.write_images(out)
    manifest.write(out / "manifest.jsonl")
    n_test = len(manifest.split("test"))
    print(f"{len(manifest)} pairs ({len(manifest) - n_test} train / {n_test} test)")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    m = _manifest(cfg)
    synthetic = _is_synthetic(m)
    train_pairs, test_pairs = _pairs(cfg, m, "train"), _pairs(cfg, m, "test")
    if not train_pairs:
        raise ManifestError("the training split yields no pairs")
    out = _out_dir(cfg)
    _dump(out / "effective_config.json", cfg.effective())
    model = _build_model(cfg, train_pairs, synthetic)
    purpose = "raw-train" if cfg.mode == "raw-pixel" else "scn-train"
    sgd = cfg.experiment().sgd(cfg.sgd_config(), purpose)

    best = {"loss": float("inf"), "epoch": 0}
    with open(out / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_mse", "test_mse"])

        def on_epoch(epoch, report):
            if epoch == 0:
                tr, te = report.initial_train_loss, report.initial_test_loss
            else:
                tr, te = report.train_loss[-1], report.test_loss[-1]
            writer.writerow([epoch, repr(tr), "" if te is None or not np.isfinite(te) else repr(te)])
            fh.flush()
            score = te if te is not None and np.isfinite(te) else tr
            if score < best["loss"]:
                best.update(loss=score, epoch=epoch)
                save_checkpoint(model, out / "best.ckpt")

        try:
            report = train(model, train_pairs, test_pairs or None, sgd, on_epoch=on_epoch)
        except DivergenceError as e:
            print(f"error: {e}; partial loss curve kept in {out / 'loss.csv'}", file=sys.stderr)
            return EXIT_NUMERIC
    save_checkpoint(model, out / "final.ckpt")
    _emit({
        "epochs": report.epochs[-1],
        "final_train_mse": report.train_loss[-1],
        "final_test_mse": report.test_loss[-1] if test_pairs else None,
        "best_epoch": best["epoch"],
        "ablated": model.ablated,
        "checkpoint": model_digest(model),
        "manifest": m.manifest_id,
    })
    return 0


def cmd_extract(cfg: RunConfig, which: str) -> int:
    model = _model_from_checkpoint(cfg)
    m = _manifest(cfg)
    out = _out_dir(cfg)
    prov = {"checkpoint": model_digest(model), "manifest": m.manifest_id}
    summary = {}
    for split in ("train", "test"):
        pairs = target_pairs(_pairs(cfg, m, split))
        if not pairs:
            continue
        for w in (("h1", "h3") if which == "both" else (which,)):
            fs = extract_features(model, pairs, w, {**prov, "split": split})
            path = out / f"{w}_{split}.feat"
            fs.save(path)
            summary[path.name] = [fs.n, fs.dim]
    if not summary:
        raise ManifestError("no labelled pairs to extract features from")
    _emit(summary)
    return 0


def cmd_eval(cfg: RunConfig, train_paths: list, test_paths: list) -> int:
    if not 1 <= len(train_paths) <= 2 or len(train_paths) != len(test_paths):
        raise UsageError("give one or two --train-features and the same number of --test-features")
    tr = [FeatureSet.load(p) for p in train_paths]
    te = [FeatureSet.load(p) for p in test_paths]
    if len(tr) == 2:
        train_fs = fuse_features(tr[0], tr[1])
        test_fs = fuse_features(te[0], te[1], tr[0], tr[1])
    else:
        train_fs, test_fs = tr[0], te[0]
    reg = float(cfg.classifier.get("reg", 1e-4))
    epochs = int(cfg.classifier.get("epochs", 100))
    clf = train_linear_classifier(train_fs, reg, epochs, derive_seed(cfg.seed, "classifier"))
    counts = np.bincount(test_fs.labels[test_fs.labels >= 0])
    result = {
        "source": train_fs.source,
        "accuracy": accuracy(clf, test_fs),
        "mAP": map_score(clf, test_fs),
        "majority_baseline": float(counts.max() / counts.sum()),
        "n_train": train_fs.n,
        "n_test": test_fs.n,
        "dim": train_fs.dim,
        "reg": reg,
        "epochs": epochs,
    }
    _dump(_out_dir(cfg) / "eval.json", result)
    _emit(result)
    return 0


def cmd_reconstruct(cfg: RunConfig, limit: Optional[int]) -> int:
    m = _manifest(cfg)
    test_pairs = _pairs(cfg, m, "test")
    if cfg.checkpoint is not None:
        model = load_checkpoint(cfg.checkpoint)
    else:
        # untrained raw-pixel model: its zero decoder paints black
        cfg.mode, cfg.reference = "raw-pixel", "random"
        model = _build_model(cfg, [], False)
    if model.mode != "raw-pixel":
        raise UsageError("reconstruction needs a raw-pixel checkpoint")
    out = _out_dir(cfg) / "reconstructions"
    out.mkdir(exist_ok=True)
    chosen = test_pairs if limit is None else test_pairs[:limit]
    for k, p in enumerate(chosen):
        reconstruct_patch(model, p.patch_j, p.offset, out / f"{p.image_id}_{k:03d}.pgm")
    result = {"written": len(chosen)}
    if _is_synthetic(m) and chosen:
        sq, tri, dark = score_reconstructions(model, chosen, cfg.synthetic_config().crop_margin)
        result.update(square_hit_rate=sq, triangle_hit_rate=tri,
                      offaxis_max_mean_intensity=max(dark) if dark else None)
    _emit(result)
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = run_suite(cfg.seed, cfg.gradcheck_instances)
    worst: dict = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.rel_error)
    failed = [f"{r.name}[{r.instance}].{r.param}" for r in results if not r.passed]
    report = {"checks": len(results), "instances": cfg.gradcheck_instances, "tolerance": TOLERANCE,
              "worst": worst, "failed": failed}
    _dump(_out_dir(cfg) / "gradcheck.json", report)
    for name, err in sorted(worst.items()):
        print(f"{name:<24} worst rel. error {err:.2e}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else 0


# --------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (required)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--manifest", help="dataset manifest (JSON lines)")
    common.add_argument("--proposals", help="proposal file replacing manifest boxes")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="scn", description="Spatial context network toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-synthetic", parents=[common], help="render the synthetic shapes dataset")

    p = sub.add_parser("train", parents=[common], help="train a spatial context network")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--tune-depth", choices=TUNE_DEPTHS)
    p.add_argument("--epochs", type=int, help="override sgd.max_epochs")
    p.add_argument("--ablate-offset", action="store_true", default=None, help="drop the offset input")

    p = sub.add_parser("extract", parents=[common], help="write h1/h3 feature sets")
    p.add_argument("--checkpoint")
    p.add_argument("--which", choices=("h1", "h3", "both"), default="both")

    p = sub.add_parser("eval", parents=[common], help="linear classification of feature sets")
    p.add_argument("--train-features", action="append", default=[], required=True)
    p.add_argument("--test-features", action="append", default=[], required=True)

    p = sub.add_parser("reconstruct", parents=[common], help="decode raw-pixel predictions to images")
    p.add_argument("--checkpoint")
    p.add_argument("--limit", type=int)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, dest="gradcheck_instances")
    return parser


def _overrides(args) -> dict:
    keys = ("seed", "out", "manifest", "proposals", "checkpoint", "mode", "tune_depth", "ablate_offset",
            "gradcheck_instances")
    return {k: getattr(args, k, None) for k in keys}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        if getattr(args, "epochs", None) is not None:
            cfg.sgd = {**(cfg.sgd or {}), "max_epochs": args.epochs}
            cfg.validate()
        if args.command == "gen-synthetic":
            return cmd_gen_synthetic(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "extract":
            return cmd_extract(cfg, args.which)
        if args.command == "eval":
            return cmd_eval(cfg, args.train_features, args.test_features)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, args.limit)
        return cmd_gradcheck(cfg)
    except (ManifestError, ImageFormatError, ProposalFormatError, EnvelopeError, GenerationError, T.DimensionError,
            OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, T.NonFiniteError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, TypeError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
