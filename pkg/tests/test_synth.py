import colorsys
import math

import numpy as np
import pytest

from alien.codec import decode_detections
from alien.errors import DimensionMismatchError, GeometryError, PlacementError
from alien.geometry import CellOrigin, TargetTruth, extract_chip, targets_in_cell
from alien.synth import (
    ChipPolicy,
    SceneSpec,
    SceneTruth,
    augment_sample,
    generate_scene,
    hsv_to_rgb,
    ingest_hotpixel_annotations,
    label_cell,
    max_window_count,
    sample_chips,
)

SMALL = SceneSpec(width=160, height=128, target_count=20)


def test_empty_scene():
    img, truth = generate_scene(SceneSpec(width=64, height=64, target_count=0), 3)
    assert img.shape == (64, 64, 3) and img.dtype == np.uint8
    assert truth.targets == []


def test_count_and_bounds():
    img, truth = generate_scene(SceneSpec(), 11)
    assert len(truth.targets) == 100
    assert (truth.width, truth.height) == (512, 512)
    for t in truth.targets:
        assert 0 <= t.x < 512 and 0 <= t.y < 512
        assert 0 <= t.hue < 360 and 0 <= t.orientation < 360
        assert 0.5 <= t.saturation <= 1 and 0.5 <= t.value <= 1


def test_determinism():
    a_img, a = generate_scene(SMALL, 5)
    b_img, b = generate_scene(SMALL, 5)
    assert np.array_equal(a_img, b_img) and a.targets == b.targets
    c_img, _ = generate_scene(SMALL, 6)
    assert not np.array_equal(a_img, c_img)


def test_separation_and_capacity():
    for seed in range(3):
        _, truth = generate_scene(SceneSpec(), seed)
        pts = np.array([(t.x, t.y) for t in truth.targets])
        d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
        np.fill_diagonal(d, np.inf)
        assert d.min() >= 12
        assert max_window_count(truth.targets, 512, 512) <= 5


def test_separation_alone_does_not_bound_capacity():
    # a 3x3 grid at 12 px spacing keeps every pair >= 12 px apart yet fits one window
    grid = [TargetTruth(4 + 12 * i, 4 + 12 * j) for i in range(3) for j in range(3)]
    assert max_window_count(grid, 64, 64) == 9


def test_max_window_count_half_open():
    pts = [TargetTruth(0, 0), TargetTruth(32, 0)]
    assert max_window_count(pts, 64, 64) == 1
    pts = [TargetTruth(0, 0), TargetTruth(31.75, 31.75)]
    assert max_window_count(pts, 64, 64) == 2


def test_dense_scene_respects_capacity():
    _, truth = generate_scene(SceneSpec(target_count=180), 1)
    assert max_window_count(truth.targets, 512, 512) <= 5


def test_placement_failure():
    with pytest.raises(PlacementError):
        generate_scene(SceneSpec(width=64, height=64, target_count=60), 0)


def test_hue_fidelity():
    img, truth = generate_scene(SceneSpec(), 21)
    for t in truth.targets:
        px = img[int(round(t.y)), int(round(t.x))] / 255.0
        h, s, v = colorsys.rgb_to_hsv(*px)
        diff = abs(h * 360 - t.hue) % 360
        assert min(diff, 360 - diff) <= 1.0
        assert abs(v - t.value) <= 1 / 255 + 1e-9


def test_front_band_is_lighter():
    img, truth = generate_scene(SceneSpec(), 22)
    for t in truth.targets:
        th = math.radians(t.orientation)
        hx, hy = math.sin(th), -math.cos(th)
        front = img[int(round(t.y + 11 * hy)), int(round(t.x + 11 * hx))].astype(int)
        back = img[int(round(t.y - 11 * hy)), int(round(t.x - 11 * hx))].astype(int)
        assert front.sum() > back.sum()


def test_hsv_to_rgb_red():
    assert hsv_to_rgb(0.0, 1.0, 1.0) == (1.0, 0.0, 0.0)


def test_sample_chips_balance_and_consistency(layout):
    img, truth = generate_scene(SceneSpec(), 3)
    samples = sample_chips(img, truth, layout, ChipPolicy(200, 0.5), seed=1)
    assert len(samples) == 200
    assert sum(s.truth.mask.any() for s in samples) == 100
    for s in samples:
        assert s.chip.shape == (80, 80, 3)
        inside = targets_in_cell(truth.targets, s.origin, layout)
        assert sorted((t.x, t.y) for t in inside) == sorted((t.x, t.y) for t in s.targets)
        assert np.array_equal(s.chip, extract_chip(img, s.origin, layout))
        dets = decode_detections(s.truth.values, layout, s.origin, 0.5)
        assert len(dets) == len(inside)
        for d in dets:
            assert any(abs(d.x - t.x) < 1e-9 and abs(d.y - t.y) < 1e-9 for t in inside)


def test_sample_chips_all_positive_and_deterministic(layout):
    img, truth = generate_scene(SceneSpec(), 4)
    a = sample_chips(img, truth, layout, ChipPolicy(50, 1.0), seed=2)
    assert all(s.truth.mask.any() for s in a)
    b = sample_chips(img, truth, layout, ChipPolicy(50, 1.0), seed=2)
    assert [s.origin for s in a] == [s.origin for s in b]


def test_sample_chips_aligned(layout):
    img, truth = generate_scene(SceneSpec(), 4)
    for s in sample_chips(img, truth, layout, ChipPolicy(30, 0.5, aligned=True), seed=0):
        assert s.origin.x0 % 32 == 0 and s.origin.y0 % 32 == 0


def test_corner_chip_is_reflected(layout):
    img, truth = generate_scene(SMALL, 9)
    s = label_cell(img, truth.targets, CellOrigin(0, 0, 0, 0), layout)
    padded = np.pad(img, ((24, 0), (24, 0), (0, 0)), mode="reflect")
    assert np.array_equal(s.chip, padded[:80, :80])
    assert s.truth.mask.sum() == len(targets_in_cell(truth.targets, CellOrigin(0, 0, 0, 0), layout))


def test_scene_too_small_for_chips(layout):
    img, truth = generate_scene(SceneSpec(width=64, height=64, target_count=1), 0)
    with pytest.raises(GeometryError):
        sample_chips(img, truth, layout)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_augment_matches_rotated_scene(layout, k):
    img, truth = generate_scene(SceneSpec(width=256, height=256, target_count=40), 17)
    h = img.shape[0]
    origin = CellOrigin(96, 64, 2, 3)
    sample = label_cell(img, truth.targets, origin, layout)
    aug = augment_sample(sample, k, False, layout)
    rot = np.ascontiguousarray(np.rot90(img, k=-k, axes=(0, 1)))
    # a quarter turn clockwise maps (x, y) -> (h - 1 - y, x) for a square scene
    x0, y0 = origin.x0, origin.y0
    for _ in range(k):
        x0, y0 = h - 32 - y0, x0
    assert np.array_equal(aug.chip, extract_chip(rot, CellOrigin(x0, y0, 0, 0), layout))
    for t, m in zip(sample.targets, aug.targets):
        x, y, ori = t.x, t.y, t.orientation
        for _ in range(k):
            x, y, ori = h - 1 - y, x, (ori + 90) % 360
        assert m.x - aug.origin.x0 == pytest.approx(x - x0)
        assert m.y - aug.origin.y0 == pytest.approx(y - y0)
        assert m.orientation == pytest.approx(ori)
        assert m.hue == t.hue


def test_augment_flip(layout):
    img, truth = generate_scene(SceneSpec(width=256, height=256, target_count=40), 17)
    sample = label_cell(img, truth.targets, CellOrigin(96, 64, 2, 3), layout)
    aug = augment_sample(sample, 0, True, layout)
    assert np.array_equal(aug.chip, sample.chip[:, ::-1])
    for t, m in zip(sample.targets, aug.targets):
        assert m.x - 96 == pytest.approx(31 - (t.x - 96))
        assert m.orientation == pytest.approx((360 - t.orientation) % 360)
    assert aug.truth.mask.sum() == sample.truth.mask.sum()


def test_augment_identity(layout):
    img, truth = generate_scene(SMALL, 1)
    s = label_cell(img, truth.targets, CellOrigin(64, 32, 1, 2), layout)
    a = augment_sample(s, 0, False, layout)
    assert np.array_equal(a.chip, s.chip) and np.array_equal(a.truth.values, s.truth.values)


def test_hotpixel_ingestion():
    img = np.zeros((20, 30, 3), np.uint8)
    assert ingest_hotpixel_annotations(img, np.zeros((20, 30), np.uint8)).targets == []
    mask = np.zeros((20, 30), np.uint8)
    mask[3, 4] = 255
    mask[10, 20] = 1
    mask[10, 21] = 7
    truth = ingest_hotpixel_annotations(img, mask)
    assert [(t.x, t.y) for t in truth.targets] == [(4, 3), (20, 10), (21, 10)]
    assert not any(t.has_attributes for t in truth.targets)
    assert (truth.width, truth.height) == (30, 20)
    with pytest.raises(DimensionMismatchError):
        ingest_hotpixel_annotations(img, np.zeros((20, 31), np.uint8))


def test_spec_validation():
    with pytest.raises(GeometryError):
        SceneSpec(width=0)
    with pytest.raises(GeometryError):
        SceneSpec(target_count=-1)
