import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from scn.cli import RunConfig, UsageError, run
from scn.data.pnm import read_image
from scn.evaluation import FeatureSet

SMALL = {
    "synthetic": {"n_square": 12, "n_triangle": 12, "n_black": 8, "n_test": 10},
    "encoder": {"conv_layers": [[4, 4, 2, 1]], "fc_dims": [16, 8], "input_size": 16},
    "pretrain": {"max_epochs": 2, "batch_size": 8},
    "sgd": {"max_epochs": 3, "batch_size": 8},
}


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert run(["gen-synthetic", "--seed", "0", "--out", str(root / "data"), "--config", str(cfg)]) == 0
    return root, cfg, root / "data" / "manifest.jsonl"


def test_default_gen_summary(tmp_path, capsys):
    assert run(["gen-synthetic", "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    assert capsys.readouterr().out.strip() == "800 pairs (600 train / 200 test)"
    assert len(list((tmp_path / "a" / "images").glob("*.pgm"))) == 800


def test_gen_rerun_same_digest(workspace, tmp_path):
    root, cfg, _ = workspace
    assert run(["gen-synthetic", "--seed", "0", "--out", str(tmp_path / "again"), "--config", str(cfg)]) == 0
    assert tree_digest(tmp_path / "again") == tree_digest(root / "data")


def test_invalid_count(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"synthetic": {"n_square": 0}}))
    assert run(["gen-synthetic", "--seed", "0", "--out", str(tmp_path), "--config", str(cfg)]) == 1
    assert "n_square" in capsys.readouterr().err


def test_seed_is_mandatory(tmp_path):
    assert run(["gen-synthetic", "--out", str(tmp_path)]) == 1
    with pytest.raises(UsageError):
        RunConfig.load(None, {"out": str(tmp_path)})


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"sede": 1}')
    assert run(["gradcheck", "--seed", "0", "--out", str(tmp_path), "--config", str(cfg)]) == 1


def test_missing_path(tmp_path):
    assert run(["train", "--seed", "0", "--out", str(tmp_path), "--manifest", str(tmp_path / "nope")]) == 1


def test_bad_subcommand():
    with pytest.raises(SystemExit) as exc:
        run(["fly"])
    assert exc.value.code == 1


def _train(root, cfg, manifest, name, *extra):
    out = root / name
    rc = run(["train", "--seed", "0", "--out", str(out), "--manifest", str(manifest), "--config", str(cfg), *extra])
    return rc, out


def test_train_outputs_and_determinism(workspace):
    root, cfg, manifest = workspace
    rc, a = _train(root, cfg, manifest, "run_a")
    assert rc == 0
    assert {p.name for p in a.iterdir()} == {"loss.csv", "final.ckpt", "best.ckpt", "effective_config.json"}
    lines = (a / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_mse,test_mse" and len(lines) == 5
    eff = json.loads((a / "effective_config.json").read_text())
    assert eff["seed"] == 0 and eff["sgd"]["max_epochs"] == 3
    _, b = _train(root, cfg, manifest, "run_b")
    assert (a / "loss.csv").read_bytes() == (b / "loss.csv").read_bytes()
    assert (a / "final.ckpt").read_bytes() == (b / "final.ckpt").read_bytes()


def test_zero_lr_flat_curve(workspace, tmp_path):
    root, _, manifest = workspace
    cfg = tmp_path / "zero.json"
    cfg.write_text(json.dumps({**SMALL, "sgd": {"base_lr": 0, "dropped_lr": 0, "momentum": 0, "max_epochs": 3}}))
    rc, out = _train(root, cfg, manifest, "zero")
    assert rc == 0
    rows = [line.split(",") for line in (out / "loss.csv").read_text().splitlines()[1:]]
    assert len({r[1] for r in rows}) == 1 and len({r[2] for r in rows}) == 1


def test_ablate_offset_flag(workspace, capsys):
    root, cfg, manifest = workspace
    rc, out = _train(root, cfg, manifest, "ablated", "--ablate-offset")
    assert rc == 0
    assert json.loads(capsys.readouterr().out)["ablated"] is True


def test_divergence_exit_code(workspace, tmp_path):
    root, _, manifest = workspace
    cfg = tmp_path / "div.json"
    cfg.write_text(json.dumps({**SMALL, "sgd": {"base_lr": 1e30, "dropped_lr": 1e29, "max_epochs": 2}}))
    rc, out = _train(root, cfg, manifest, "diverged")
    assert rc == 3
    assert (out / "loss.csv").read_text().splitlines()[1].startswith("0,")


def test_extract_and_eval(workspace, capsys):
    root, cfg, manifest = workspace
    _, trained = _train(root, cfg, manifest, "for_extract")
    feats = root / "feats"
    assert run(["extract", "--seed", "0", "--out", str(feats), "--manifest", str(manifest),
                "--config", str(cfg), "--checkpoint", str(trained / "final.ckpt")]) == 0
    h3 = FeatureSet.load(feats / "h3_test.feat")
    assert h3.n == 10 and h3.dim == 8 and h3.source == "h3"
    assert set(h3.provenance) >= {"checkpoint", "manifest"}
    capsys.readouterr()
    assert run(["eval", "--seed", "0", "--out", str(root / "ev"),
                "--train-features", str(feats / "h1_train.feat"), "--train-features", str(feats / "h3_train.feat"),
                "--test-features", str(feats / "h1_test.feat"), "--test-features", str(feats / "h3_test.feat")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["dim"] == 16 and report["source"] == "fused"
    assert 0 <= report["accuracy"] <= 1


def test_eval_perfect_ranker(tmp_path, capsys):
    y = np.array([0, 1, 2] * 10)
    X = np.eye(3)[y] * 5
    FeatureSet(X, y, "h1").save(tmp_path / "tr.feat")
    FeatureSet(X, y, "h1").save(tmp_path / "te.feat")
    assert run(["eval", "--seed", "0", "--out", str(tmp_path / "o"), "--train-features", str(tmp_path / "tr.feat"),
                "--test-features", str(tmp_path / "te.feat")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["accuracy"] == 1.0 and report["mAP"] == 1.0


def test_eval_corrupt_features(tmp_path):
    FeatureSet(np.ones((2, 2)), [0, 1], "h1").save(tmp_path / "f.feat")
    raw = bytearray((tmp_path / "f.feat").read_bytes())
    raw[-12] ^= 0xFF
    (tmp_path / "f.feat").write_bytes(bytes(raw))
    path = str(tmp_path / "f.feat")
    assert run(["eval", "--seed", "0", "--out", str(tmp_path), "--train-features", path, "--test-features", path]) == 2


def test_reconstruct_untrained_is_black(workspace):
    root, cfg, manifest = workspace
    out = root / "rec"
    assert run(["reconstruct", "--seed", "0", "--out", str(out), "--manifest", str(manifest),
                "--config", str(cfg), "--limit", "4"]) == 0
    images = sorted((out / "reconstructions").glob("*.pgm"))
    assert len(images) == 4
    assert all(not read_image(p).any() for p in images)


def test_reconstruct_rejects_feature_checkpoint(workspace):
    root, cfg, manifest = workspace
    _, trained = _train(root, cfg, manifest, "feature_ckpt")
    assert run(["reconstruct", "--seed", "0", "--out", str(root / "r2"), "--manifest", str(manifest),
                "--config", str(cfg), "--checkpoint", str(trained / "final.ckpt")]) == 1


def test_gradcheck_exit_zero(tmp_path, capsys):
    assert run(["gradcheck", "--seed", "0", "--out", str(tmp_path), "--instances", "2"]) == 0
    assert "54/54 checks passed" in capsys.readouterr().out
    assert json.loads((tmp_path / "gradcheck.json").read_text())["failed"] == []


def test_raw_pixel_train_then_reconstruct(workspace, capsys):
    root, cfg, manifest = workspace
    rc, out = _train(root, cfg, manifest, "raw", "--mode", "raw-pixel")
    assert rc == 0
    capsys.readouterr()
    assert run(["reconstruct", "--seed", "0", "--out", str(root / "rec_raw"), "--manifest", str(manifest),
                "--config", str(cfg), "--checkpoint", str(out / "final.ckpt")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["written"] == 10 and "square_hit_rate" in summary
    assert read_image(next((root / "rec_raw" / "reconstructions").glob("*.pgm"))).shape == (16, 16)


def test_proposals_replace_boxes(workspace, tmp_path, capsys):
    root, cfg, manifest = workspace
    props = tmp_path / "props.jsonl"
    lines = []
    for r in json.loads("[" + ",".join(manifest.read_text().splitlines()) + "]"):
        for x0, y0, x1, y1 in r["boxes"]:
            lines.append(json.dumps({"image_id": r["image_id"], "x": x0, "y": y0, "w": x1 - x0, "h": y1 - y0,
                                     "confidence": 0.9}))
    props.write_text("\n".join(lines) + "\n")
    # proposals carry no labels, so the reference cannot be pretrained on them
    rc, _ = _train(root, cfg, manifest, "props_pretrain", "--proposals", str(props), "--epochs", "1")
    assert rc == 1 and "reference" in capsys.readouterr().err
    _, labelled = _train(root, cfg, manifest, "props_ref", "--epochs", "1")
    cfg2 = tmp_path / "ref.json"
    cfg2.write_text(json.dumps({**SMALL, "reference": str(labelled / "final.ckpt")}))
    rc, out = _train(root, cfg2, manifest, "props", "--proposals", str(props), "--epochs", "1")
    assert rc == 0 and (out / "final.ckpt").exists()
    eff = json.loads((out / "effective_config.json").read_text())
    assert eff["proposals"] == str(props)
