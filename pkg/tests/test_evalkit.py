import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionattn.dataset import BACKGROUND, PALETTE, synth_dataset
from regionattn.evalkit import (REPORT_SCHEMA, Box, EvalReport, attention_inmask_fraction, detect_blob,
                                heatmap_bytes, heatmap_export, iou)
from regionattn.imageio import read_pgm


def pixel_iou(a, b, size=16):
    ga, gb = np.zeros((size, size), bool), np.zeros((size, size), bool)
    ga[a[1]:a[3], a[0]:a[2]] = True
    gb[b[1]:b[3], b[0]:b[2]] = True
    return (ga & gb).sum() / (ga | gb).sum()


boxes = st.tuples(st.integers(0, 14), st.integers(0, 14), st.integers(1, 15), st.integers(1, 15)).map(
    lambda t: (t[0], t[1], max(t[2], t[0] + 1), max(t[3], t[1] + 1)))


class TestIoU:
    def test_identical(self):
        assert iou((1, 2, 5, 9), (1, 2, 5, 9)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 2, 2), (2, 2, 4, 4)) == 0.0

    def test_third(self):
        assert iou((0, 0, 4, 4), (2, 0, 6, 4)) == pytest.approx(1 / 3, abs=1e-15)
        assert pixel_iou((0, 0, 4, 4), (2, 0, 6, 4)) == pytest.approx(8 / 24)

    @settings(max_examples=100, deadline=None)
    @given(boxes, boxes)
    def test_pixel_count_and_symmetry(self, a, b):
        assert iou(a, b) == iou(b, a)
        assert abs(iou(a, b) - pixel_iou(a, b)) < 1e-12


def gray(h=32, w=32):
    img = np.empty((h, w, 3))
    img[:] = BACKGROUND
    return img


def label_components(hit):
    """Flood-fill labelling used as the oracle."""
    h, w = hit.shape
    lab = np.zeros((h, w), int)
    n = 0
    for y in range(h):
        for x in range(w):
            if hit[y, x] and not lab[y, x]:
                n += 1
                stack = [(y, x)]
                lab[y, x] = n
                while stack:
                    cy, cx = stack.pop()
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        ny, nx_ = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx_ < w and hit[ny, nx_] and not lab[ny, nx_]:
                            lab[ny, nx_] = n
                            stack.append((ny, nx_))
    return lab, n


class TestDetect:
    def test_single_square(self):
        img = gray()
        img[4:12, 8:20] = PALETTE["red"]
        assert detect_blob(img, PALETTE["red"]) == Box(8, 4, 20, 12)

    def test_empty(self):
        assert detect_blob(gray(), PALETTE["red"]) is None

    def test_two_regions_picks_larger(self):
        rs = np.random.default_rng(0)
        for _ in range(10):
            img = gray()
            hit = rs.random((32, 32)) < 0.35
            img[hit] = PALETTE["red"]
            lab, n = label_components(hit)
            sizes = [(lab == i).sum() for i in range(1, n + 1)]
            best = int(np.argmax(sizes)) + 1
            ys, xs = np.nonzero(lab == best)
            expect = None if max(sizes) < 16 else Box(xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
            assert detect_blob(img, PALETTE["red"]) == expect

    def test_dataset_boxes_recovered(self):
        for s in synth_dataset(200, 4):
            for e in s.entities:
                assert detect_blob(s.image, PALETTE[e.color]) == e.bbox


class TestAttentionStats:
    def test_uniform_half(self):
        m = np.zeros((4, 4), np.uint8)
        m[:2] = 1
        assert attention_inmask_fraction(np.ones((4, 4)), m) == 0.5

    def test_confined(self):
        m = np.zeros(16, np.uint8)
        m[[1, 5]] = 1
        w = np.zeros(16)
        w[[1, 5]] = [0.2, 0.3]
        assert attention_inmask_fraction(w, m) == 1.0
        assert attention_inmask_fraction(np.zeros(16), m) == 1.0

    def test_exactly_one_when_nothing_leaks(self):
        rs = np.random.default_rng(3)
        for _ in range(200):
            m = rs.integers(0, 2, 64).astype(np.uint8)
            w = rs.random(64) * m
            assert attention_inmask_fraction(w, m) == 1.0


class TestHeatmap:
    def test_constant_mid_gray(self):
        assert (heatmap_bytes(np.full((4, 4), 0.3), (16, 16)) == 128).all()

    def test_delta_map(self):
        a = np.zeros((4, 4))
        a[1, 2] = 1
        g = heatmap_bytes(a, (16, 16))
        assert (g[4:8, 8:12] == 255).all() and g.sum() == 255 * 16

    def test_round_trip(self, tmp_path):
        a = np.random.default_rng(0).random((8, 8))
        heatmap_export(a, tmp_path / "h.pgm", (64, 64))
        raw = (tmp_path / "h.pgm").read_bytes()
        assert raw.startswith(b"P5\n64 64\n255\n")
        assert np.array_equal(read_pgm(tmp_path / "h.pgm"), heatmap_bytes(a, (64, 64)))
        assert raw[len(b"P5\n64 64\n255\n"):] == heatmap_bytes(a, (64, 64)).tobytes()

    def test_non_finite(self):
        with pytest.raises(ValueError):
            heatmap_bytes(np.array([[np.nan]]), (1, 1))


def test_report_schema_and_mean():
    ious = list(np.random.default_rng(0).random(7))
    rep = EvalReport.from_ious(ious, attention_inmask_fraction=[1.0, 0.8], seed_count=5)
    assert abs(rep.miou - sum(ious) / len(ious)) < 1e-12
    jsonschema.validate(json.loads(rep.to_json()), REPORT_SCHEMA)
