import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scn.data import (
    BoundingBox, Manifest, SyntheticConfig, check_constraints, compute_offset, crop_resize, gen_synthetic, iou,
    make_pairs, overlap_fraction, pair_from_boxes, pair_random,
)
from scn.data import pnm
from scn.data.manifest import ManifestError
from scn.data.proposals import (
    ProposalFormatError, apply_proposals, filter_proposals, ingest_proposals, parse_proposals,
)
from scn.data.synthetic import CLASS_ID, GenerationError, render, shape_template


def box(x0, y0, x1, y1):
    return BoundingBox.from_xyxy(x0, y0, x1, y1)


def raster_iou(a, b, size=64):
    """Pixel-counting IoU for integer boxes on a grid."""
    def mask(bb):
        m = np.zeros((size, size), bool)
        x0, y0, x1, y1 = map(int, bb.xyxy)
        m[y0:y1, x0:x1] = True
        return m

    ma, mb = mask(a), mask(b)
    return (ma & mb).sum() / (ma | mb).sum()


def random_int_boxes(rng, n, size=64):
    out = []
    while len(out) < n:
        x0, x1 = sorted(rng.integers(0, size + 1, 2))
        y0, y1 = sorted(rng.integers(0, size + 1, 2))
        if x1 > x0 and y1 > y0:
            out.append(box(x0, y0, x1, y1))
    return out


class TestBoundingBox:
    def test_non_rectangle_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox((0, 0, 10, 1, 0, 10, 10, 10))

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            box(5, 5, 5, 10)

    def test_geometry(self):
        b = BoundingBox.from_xywh(2, 3, 10, 4)
        assert b.xyxy == (2, 3, 12, 7)
        assert (b.width, b.height, b.area, b.center, b.aspect) == (10, 4, 40, (7, 5), 2.5)
        assert b.expand(0.5).xyxy == (-3, 1, 17, 9)


class TestOffsets:
    def test_identical_boxes(self):
        b = box(1, 2, 3, 4)
        assert not compute_offset(b, b).any()

    def test_forced_arithmetic(self):
        o = compute_offset(box(10, 20, 30, 40), box(50, 20, 70, 40))
        np.testing.assert_array_equal(o, [-40, 0, -40, 0, -40, 0, -40, 0])

    def test_antisymmetry(self):
        rng = np.random.default_rng(0)
        boxes = random_int_boxes(rng, 200)
        for a, b in zip(boxes[::2], boxes[1::2]):
            assert np.array_equal(compute_offset(a, b), -compute_offset(b, a))


class TestIou:
    def test_identity_and_disjoint(self):
        a = box(0, 0, 10, 10)
        assert iou(a, a) == 1.0
        assert iou(a, box(10, 0, 20, 10)) == 0.0

    def test_matches_raster(self):
        rng = np.random.default_rng(1)
        boxes = random_int_boxes(rng, 400)
        for a, b in zip(boxes[::2], boxes[1::2]):
            v = iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == iou(b, a)
            assert abs(v - raster_iou(a, b)) <= 1e-6

    def test_overlap_fraction(self):
        a = box(0, 0, 10, 10)
        assert overlap_fraction([(a, a)] * 3) == 0.0
        assert overlap_fraction([(a, box(20, 20, 30, 30))] * 3) == 1.0
        pairs = [
            (a, a),                      # 1.0
            (a, box(0, 0, 10, 5)),       # 0.5
            (a, box(5, 0, 15, 10)),      # 50 / 150
            (a, box(8, 0, 18, 10)),      # 20 / 180
            (a, box(9, 9, 19, 19)),      # 1 / 199
            (a, box(0, 0, 10, 2)),       # 0.2, not strictly below
            (a, box(0, 0, 10, 1)),       # 0.1
            (a, box(30, 30, 40, 40)),    # 0
            (a, box(2, 2, 8, 8)),        # 0.36
            (a, box(0, 8, 10, 18)),      # 20 / 180
        ]
        assert overlap_fraction(pairs, 0.2) == 5 / 10

    def test_overlap_fraction_empty(self):
        with pytest.raises(ValueError):
            overlap_fraction([])


class TestCropResize:
    def test_full_image_identity(self):
        img = np.random.default_rng(2).integers(0, 256, (16, 16)).astype(np.uint8)
        patch = crop_resize(img, box(0, 0, 16, 16), 16)
        np.testing.assert_array_equal(patch[0], img / np.float32(255.0))

    def test_checkerboard_bilinear(self):
        img = np.array([[0, 255], [255, 0]], np.uint8)
        patch = crop_resize(img, box(0, 0, 2, 2), 8)[0]
        # output centers map to clamped source positions 0, 0, .125, .375, .625, .875, 1, 1
        pos = np.clip((np.arange(8) + 0.5) / 4 - 0.5, 0, 1)
        x, y = np.meshgrid(pos, pos)
        np.testing.assert_allclose(patch, x + y - 2 * x * y, atol=1e-6)

    def test_constant_region(self):
        img = np.full((20, 30, 3), 77, np.uint8)
        patch = crop_resize(img, box(3, 4, 17, 19), 8)
        assert patch.shape == (3, 8, 8)
        np.testing.assert_allclose(patch, 77 / 255, atol=1e-6)

    def test_clamps_partial_box(self):
        img = np.full((10, 10), 255, np.uint8)
        patch = crop_resize(img, box(-5, -5, 5, 5), 8)
        np.testing.assert_allclose(patch, 1.0)

    def test_errors(self):
        img = np.zeros((10, 10), np.uint8)
        with pytest.raises(ValueError):
            crop_resize(img, box(20, 20, 30, 30), 8)
        with pytest.raises(ValueError):
            crop_resize(img, box(0, 0, 5, 5), 4)


def _boxes_manifest(n_boxes_per_image):
    records, images = [], {}
    for k, n in enumerate(n_boxes_per_image):
        iid = f"im{k}"
        images[iid] = np.zeros((40, 40), np.uint8)
        records.append({
            "image_id": iid, "image": f"{iid}.pgm", "split": "train", "provenance": "bbox",
            "boxes": [[4 * b, 0, 4 * b + 8, 8] for b in range(n)], "labels": None,
        })
    return Manifest(records, None, images)


class TestPairing:
    @pytest.mark.parametrize("n, expected", [(1, 0), (2, 2), (3, 6)])
    def test_pair_counts(self, n, expected):
        assert len(pair_from_boxes(_boxes_manifest([n]), 8)) == expected

    def test_ordered_pairs_within_image(self):
        pairs = pair_from_boxes(_boxes_manifest([2, 3]), 8)
        assert len(pairs) == 8
        first = [(p.box_i.xyxy[0], p.box_j.xyxy[0]) for p in pairs[:2]]
        assert first == [(0, 4), (4, 0)]
        for p in pairs:
            assert p.box_i != p.box_j
            assert np.array_equal(p.offset, compute_offset(p.box_i, p.box_j))

    def test_random_pairs(self):
        img = np.zeros((100, 120), np.uint8)
        assert len(pair_random(img, 5, 64, seed=3)) == 10
        assert len(pair_random(img, 2, 64, seed=3)) == 1
        a = [p.box_i for p in pair_random(img, 5, 64, seed=3)]
        b = [p.box_i for p in pair_random(img, 5, 64, seed=3)]
        assert a == b
        for p in pair_random(img, 5, 64, seed=3):
            assert p.box_i.width == 64 and p.box_i.inside(120, 100)

    def test_random_image_too_small(self):
        with pytest.raises(ValueError):
            pair_random(np.zeros((64, 64), np.uint8), 5, 64)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            make_pairs(_boxes_manifest([2]), "sliding")


@pytest.fixture(scope="module")
def generated():
    return gen_synthetic(SyntheticConfig(), seed=0)


class TestSynthetic:
    def test_counts(self, generated):
        _, m = generated
        assert len(m) == 800
        assert len(m.split("train")) == 600 and len(m.split("test")) == 200
        kinds = [r["synthetic"]["partner"] for r in m]
        assert (kinds.count("square"), kinds.count("triangle"), kinds.count("black")) == (300, 300, 200)

    def test_constraints_hold(self, generated):
        _, m = generated
        assert check_constraints(m, SyntheticConfig()) == []
        tol = 30 * 64 / 224
        for r in m:
            (c, o) = m.boxes(r)
            if r["synthetic"]["partner"] == "square":
                assert abs(c.center[1] - o.center[1]) <= tol

    def test_split_disjoint_and_pairs_closed(self, generated):
        _, m = generated
        train_ids = {r["image_id"] for r in m.split("train")}
        test_ids = {r["image_id"] for r in m.split("test")}
        assert not train_ids & test_ids
        for r in m:
            for j, i in r["pairs"]:
                assert 0 <= i < len(r["boxes"]) and 0 <= j < len(r["boxes"])
                assert r["labels"][j] == CLASS_ID["circle"]

    def test_deterministic(self, generated):
        images, m = generated
        images2, m2 = gen_synthetic(SyntheticConfig(), seed=0)
        assert m.to_jsonl() == m2.to_jsonl()
        assert all(a.tobytes() == b.tobytes() for a, b in zip(images, images2))
        _, m3 = gen_synthetic(SyntheticConfig(), seed=1)
        assert m3.to_jsonl() != m.to_jsonl()

    def test_binary_shapes(self, generated):
        images, _ = generated
        assert set(np.unique(np.stack(images)).tolist()) <= {0, 255}

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SyntheticConfig(n_square=0)

    def test_retry_cap(self):
        with pytest.raises(GenerationError):
            gen_synthetic(SyntheticConfig(canvas=40, n_square=1, n_triangle=1, n_black=1, n_test=1,
                                          max_retries=5), seed=0)

    def test_render_square(self):
        canvas = np.zeros((10, 10), np.uint8)
        render(canvas, "square", 5, 5, 2)
        assert canvas.sum() == 16 * 255

    def test_templates_differ(self):
        assert not np.array_equal(shape_template("square", 32, 0.15), shape_template("triangle", 32, 0.15))


class TestProposals:
    LINES = [
        '{"image_id": "a", "x": 0, "y": 0, "w": 10, "h": 10, "confidence": 0.05}',
        '{"image_id": "a", "x": 0, "y": 0, "w": 10, "h": 10, "confidence": 0.9}',
        '{"image_id": "a", "x": 0, "y": 0, "w": 100, "h": 10, "confidence": 0.9}',
        '{"image_id": "b", "x": 30, "y": 30, "w": 20, "h": 20, "confidence": 0.5}',
    ]

    def test_filter(self):
        kept = filter_proposals(parse_proposals(self.LINES))
        assert [(p.image_id, p.box.width) for p in kept] == [("a", 10), ("b", 20)]

    def test_idempotent(self):
        once = filter_proposals(parse_proposals(self.LINES))
        assert filter_proposals(once) == once

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.floats(1, 50), st.floats(1, 50), st.floats(0, 1)), max_size=20))
    def test_idempotent_random(self, rows):
        lines = [json.dumps({"image_id": "x", "x": 0, "y": 0, "w": w, "h": h, "confidence": c}) for w, h, c in rows]
        once = filter_proposals(parse_proposals(lines))
        assert filter_proposals(once) == once

    def test_clamped_and_flagged(self):
        props = parse_proposals(self.LINES[3:], image_sizes={"b": (40, 40)})
        assert props[0].clamped and props[0].box.xyxy == (30, 30, 40, 40)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "p.jsonl"
        path.write_text(self.LINES[0] + "\n{not json\n")
        with pytest.raises(ProposalFormatError) as exc:
            ingest_proposals(path)
        assert exc.value.lineno == 2 and "line 2" in str(exc.value)

    def test_apply_records_provenance(self):
        m = _boxes_manifest([2])
        props = filter_proposals(parse_proposals(['{"image_id": "im0", "x": 1, "y": 1, "w": 9, "h": 9, "confidence": 0.4}']))
        out = apply_proposals(m, props)
        rec = out.records[0]
        assert rec["provenance"] == "proposal" and rec["boxes"] == [[1, 1, 10, 10]]
        assert rec["proposal_filter"]["aspect_bounds"] == [1 / 3, 3.0]
        out.validate()


class TestPnm:
    @pytest.mark.parametrize("shape", [(5, 7), (4, 6, 3)])
    def test_round_trip(self, tmp_path, shape):
        img = np.random.default_rng(0).integers(0, 256, shape).astype(np.uint8)
        path = tmp_path / "x.pnm"
        pnm.write_image(path, img)
        back = pnm.read_image(path)
        assert back.tobytes() == img.tobytes() and back.shape == img.shape
        assert pnm.encode(back) == path.read_bytes()

    def test_header_comments(self):
        data = b"P5\n# a comment\n2 1\n255\n\x01\x02"
        np.testing.assert_array_equal(pnm.decode(data), [[1, 2]])

    def test_bad_magic(self):
        with pytest.raises(pnm.ImageFormatError):
            pnm.decode(b"P3\n1 1\n255\n0")


class TestManifest:
    def test_round_trip(self, tmp_path):
        images, m = gen_synthetic(SyntheticConfig(n_square=2, n_triangle=2, n_black=2, n_test=2), seed=4)
        m.write_images(tmp_path)
        m.write(tmp_path / "manifest.jsonl")
        back = Manifest.read(tmp_path / "manifest.jsonl")
        assert back.to_jsonl() == m.to_jsonl() and back.manifest_id == m.manifest_id
        for r, img in zip(back, images):
            assert back.load_image(r).tobytes() == img.tobytes()

    def test_bad_line_named(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"image_id": "a"}\n[oops\n')
        with pytest.raises(ManifestError, match=":2:"):
            Manifest.read(path)

    def test_duplicate_ids(self):
        m = _boxes_manifest([1, 1])
        m.records[1]["image_id"] = "im0"
        with pytest.raises(ManifestError):
            m.validate()
