import math

import numpy as np
import pytest
from ccd.cam_views import (
    ActivationMap,
    FeatureMapTensor,
    PixelBox,
    ViewConfig,
    compute_cam,
    extract_box,
    normalize_map,
    perturb_boxes,
    propose_views,
    select_classes,
)
from ccd.errors import DataError


def make_fm(values, image_id="img", width=640, height=640):
    return FeatureMapTensor(image_id=image_id, values=np.asarray(values, dtype=float),
                            width_px=width, height_px=height)


def brute_force_box(values, threshold, width_px, height_px):
    """Oracle: scan every cell, take floor/ceil pixel hull of passing cells."""
    h, w = values.shape
    cells = [(y, x) for y in range(h) for x in range(w) if values[y][x] >= threshold]
    if not cells:
        return None
    xs = [x for _, x in cells]
    ys = [y for y, _ in cells]
    x0 = math.floor(min(xs) * width_px / w)
    x1 = math.ceil((max(xs) + 1) * width_px / w)
    y0 = math.floor(min(ys) * height_px / h)
    y1 = math.ceil((max(ys) + 1) * height_px / h)
    return (x0, y0, min(x1, width_px), min(y1, height_px))


class TestComputeCam:
    def test_single_channel_identity(self):
        fm = make_fm(np.arange(4).reshape(1, 2, 2))
        cam = compute_cam(fm, np.array([[1.0]]), 0)
        np.testing.assert_array_equal(cam.values, fm.values[0])

    def test_zero_weights_zero_map(self):
        fm = make_fm(np.random.default_rng(0).normal(size=(3, 4, 4)))
        cam = compute_cam(fm, np.zeros((2, 3)), 1)
        np.testing.assert_array_equal(cam.values, np.zeros((4, 4)))

    def test_two_channel_difference(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[0.5, 0.5], [1.0, 1.0]])
        fm = make_fm(np.stack([a, b]))
        cam = compute_cam(fm, np.array([[1.0, -1.0]]), 0)
        np.testing.assert_allclose(cam.values, a - b)

    def test_dim_mismatch(self):
        fm = make_fm(np.zeros((3, 2, 2)))
        with pytest.raises(DataError):
            compute_cam(fm, np.zeros((2, 4)), 0)

    def test_linear_in_weights(self):
        rng = np.random.default_rng(1)
        fm = make_fm(rng.normal(size=(5, 6, 6)))
        w1 = rng.normal(size=(1, 5))
        w2 = rng.normal(size=(1, 5))
        lhs = compute_cam(fm, w1 + w2, 0).values
        rhs = compute_cam(fm, w1, 0).values + compute_cam(fm, w2, 0).values
        assert np.abs(lhs - rhs).max() < 1e-5


class TestNormalizeMap:
    def test_min_max(self):
        m = ActivationMap(values=np.array([[0.0, 2.0, 4.0]]), class_index=0)
        out = normalize_map(m)
        np.testing.assert_allclose(out.values, [[0.0, 0.5, 1.0]])
        assert out.normalized

    def test_constant_map_becomes_zero(self):
        m = ActivationMap(values=np.full((2, 2), 3.7), class_index=0)
        np.testing.assert_array_equal(normalize_map(m).values, np.zeros((2, 2)))

    def test_already_normalized_unchanged(self):
        vals = np.array([[0.0, 0.25], [0.75, 1.0]])
        out = normalize_map(ActivationMap(values=vals, class_index=0))
        np.testing.assert_allclose(out.values, vals)


class TestExtractBox:
    def test_single_cell_on_8x8_grid(self):
        # cell column 2, row 3 on a 640x640 image: 80-px cells
        vals = np.zeros((8, 8))
        vals[3, 2] = 1.0
        m = ActivationMap(values=vals, class_index=0, normalized=True)
        box = extract_box(m, 0.95, (640, 640))
        assert box.coords == (160, 240, 240, 320)

    def test_opposite_corners_cover_image(self):
        vals = np.zeros((8, 8))
        vals[0, 0] = 1.0
        vals[7, 7] = 1.0
        m = ActivationMap(values=vals, class_index=0, normalized=True)
        assert extract_box(m, 0.5, (640, 640)).coords == (0, 0, 640, 640)

    def test_nothing_passes_returns_none(self):
        m = ActivationMap(values=np.zeros((4, 4)), class_index=0, normalized=True)
        assert extract_box(m, 0.95, (640, 640)) is None

    def test_requires_normalized(self):
        m = ActivationMap(values=np.ones((2, 2)), class_index=0, normalized=False)
        with pytest.raises(DataError):
            extract_box(m, 0.5, (64, 64))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            h = int(rng.integers(1, 17))
            w = int(rng.integers(1, 17))
            vals = rng.random((h, w))
            vals.flat[rng.integers(vals.size)] = 1.0  # force a max of 1
            width_px = int(rng.integers(w, 800))
            height_px = int(rng.integers(h, 800))
            threshold = float(rng.choice([0.3, 0.5, 0.8, 0.95]))
            m = ActivationMap(values=vals / vals.max(), class_index=0, normalized=True)
            got = extract_box(m, threshold, (width_px, height_px))
            want = brute_force_box(m.values, threshold, width_px, height_px)
            assert (got.coords if got else None) == want


class TestPerturbBoxes:
    def test_offset_zero_k_zero(self):
        base = PixelBox(100, 100, 200, 200)
        out = perturb_boxes(base, 0, 0, seed=1, image_dims=(640, 640))
        assert len(out) == 1 and out[0].coords == (100, 100, 200, 200)

    def test_expansion_arithmetic(self):
        base = PixelBox(100, 100, 200, 200)
        out = perturb_boxes(base, 80, 0, seed=1, image_dims=(640, 640))
        assert out[0].coords == (20, 20, 280, 280)

    def test_expansion_clips_to_image(self):
        base = PixelBox(10, 10, 620, 630)
        out = perturb_boxes(base, 80, 0, seed=1, image_dims=(640, 640))
        assert out[0].coords == (0, 0, 640, 640)

    def test_deterministic(self):
        base = PixelBox(50, 60, 300, 310)
        a = perturb_boxes(base, 80, 5, seed=42, image_dims=(640, 640))
        b = perturb_boxes(base, 80, 5, seed=42, image_dims=(640, 640))
        assert [x.coords for x in a] == [x.coords for x in b]

    def test_all_boxes_valid_after_clipping(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            w_img = int(rng.integers(100, 700))
            h_img = int(rng.integers(100, 700))
            x0 = int(rng.integers(0, w_img - 1))
            y0 = int(rng.integers(0, h_img - 1))
            x1 = int(rng.integers(x0 + 1, w_img + 1))
            y1 = int(rng.integers(y0 + 1, h_img + 1))
            base = PixelBox(x0, y0, x1, y1)
            for box in perturb_boxes(base, 80, 3, seed=int(rng.integers(1 << 30)),
                                     image_dims=(w_img, h_img)):
                assert 0 <= box.x0 < box.x1 <= w_img
                assert 0 <= box.y0 < box.y1 <= h_img

    def test_kinds_and_counts(self):
        base = PixelBox(100, 100, 200, 200, class_index=3)
        out = perturb_boxes(base, 40, 2, seed=9, image_dims=(640, 640))
        assert out[0].kind == "base"
        assert all(b.kind == "perturbed" for b in out[1:])
        assert len(out) == 3


class TestSelectClasses:
    def test_simple(self):
        assert select_classes(np.array([0.9, 0.1]), 0.5) == [0]

    def test_none_above(self):
        assert select_classes(np.array([0.1, 0.2]), 0.5) == []

    def test_strict_inequality_at_paper_threshold(self):
        assert select_classes(np.array([0.51, 0.5, 0.7]), 0.5) == [0, 2]


class TestProposeViews:
    def _fm_with_blobs(self, active_channels, grid=(8, 8), q=4):
        vals = np.zeros((q, *grid))
        for ch, (y, x) in active_channels.items():
            vals[ch, y, x] = 5.0
        return make_fm(vals)

    def test_no_class_selected_empty(self):
        fm = self._fm_with_blobs({0: (2, 2)})
        head = np.eye(3, 4)
        vs = propose_views(fm, head, np.array([0.1, 0.1, 0.1]), ViewConfig())
        assert vs.n == 0

    def test_one_class_k2_gives_three(self):
        fm = self._fm_with_blobs({0: (2, 2)})
        head = np.eye(3, 4)
        vs = propose_views(fm, head, np.array([0.9, 0.1, 0.1]),
                           ViewConfig(perturb_k=2))
        assert vs.n == 3

    def test_cap_truncates(self):
        fm = self._fm_with_blobs({0: (1, 1), 1: (5, 5), 2: (6, 2)})
        head = np.eye(3, 4)
        vs = propose_views(fm, head, np.array([0.9, 0.9, 0.9]),
                           ViewConfig(perturb_k=2, views_cap=4))
        assert vs.n == 4
        # ascending class order, expanded box first within a class
        assert [b.class_index for b in vs.boxes] == [0, 0, 0, 1]
        assert vs.boxes[0].kind == "base" and vs.boxes[3].kind == "base"

    def test_budget_adaptivity(self):
        head = np.eye(4, 6)
        counts = []
        for n_active in (1, 2, 3, 4):
            fm = self._fm_with_blobs({c: (c, c) for c in range(n_active)}, q=6)
            probs = np.array([0.9] * n_active + [0.1] * (4 - n_active))
            vs = propose_views(fm, head, probs, ViewConfig(perturb_k=2, views_cap=None))
            counts.append(vs.n)
        assert counts == sorted(counts)
        assert counts[0] < counts[-1]

    def test_deterministic_across_calls(self):
        fm = self._fm_with_blobs({0: (2, 2), 1: (6, 6)})
        head = np.eye(3, 4)
        probs = np.array([0.9, 0.8, 0.1])
        a = propose_views(fm, head, probs, ViewConfig(), global_seed=5)
        b = propose_views(fm, head, probs, ViewConfig(), global_seed=5)
        assert [x.coords for x in a.boxes] == [x.coords for x in b.boxes]


def iou(a, b):
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0, ix1 - ix0) * max(0, iy1 - iy0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def test_planted_blob_box_overlaps_gt(tiny_world):
    """Ideal-head CAM views must land on the planted boxes (IoU >= 0.3)."""
    from ccd.synth import build_feature_map

    world, _ = tiny_world
    cfg = ViewConfig(perturb_k=0, offset_px=0)  # offset 0: the tight base box
    checked = 0
    for image in world.images[:20]:
        fm = make_fm(build_feature_map(world, image), image_id=image.image_id,
                     width=image.width, height=image.height)
        head = world.signatures  # ideal head: rows are the channel signatures
        for c in image.present:
            probs = np.zeros(world.spec.n_classes)
            probs[c] = 1.0
            vs = propose_views(fm, head, probs, cfg)
            assert vs.n == 1
            gt = image.boxes[c]
            assert iou(vs.boxes[0].coords, gt) >= 0.3, (
                f"{image.image_id} class {c}: cam box {vs.boxes[0].coords} vs gt {gt}"
            )
            checked += 1
    assert checked >= 20
