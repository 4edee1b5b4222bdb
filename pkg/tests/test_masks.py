import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvinpaint.masks import (
    MaskError,
    MaskSet,
    RectParams,
    StrokeParams,
    box_mask,
    dilate,
    disturb_object_mask,
    iou,
    irregular_mask,
    rect_mask,
    sample_training_masks,
)


def test_full_canvas_stroke_saturates():
    p = StrokeParams(strokes=(1, 1), width=(4000.0, 4000.0), coverage=(0.0, 1.0), scale_with_resolution=False)
    assert irregular_mask(np.random.default_rng(0), 32, 32, p).all()


def test_zero_width_rejected():
    with pytest.raises(MaskError):
        irregular_mask(np.random.default_rng(0), 32, 32, StrokeParams(width=(0.0, 4.0)))


def test_coverage_bounds():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        cov = irregular_mask(rng, 32, 32).mean()
        assert 0.05 <= cov <= 0.6


def test_rectangles():
    assert box_mask(8, 8, 0, 0, 8, 8).all()
    one = box_mask(8, 8, 0, 0, 1, 1)
    assert one.sum() == 1 and one[0, 0] == 1
    rng = np.random.default_rng(0)
    for _ in range(50):
        w, h = rng.integers(1, 17, 2)
        x0, y0 = rng.integers(0, 17 - w), rng.integers(0, 17 - h)
        assert box_mask(16, 16, x0, y0, w, h).sum() == w * h
    m = rect_mask(rng, 32, 32, RectParams())
    assert 0 < m.sum() < 32 * 32


def _object():
    m = np.zeros((32, 32), np.uint8)
    m[10:20, 12:22] = 1
    return m


def test_disturb_identity_and_superset():
    obj = _object()
    assert np.array_equal(disturb_object_mask(obj, np.random.default_rng(0), amplitude=0), obj)
    rng = np.random.default_rng(1)
    draws = [disturb_object_mask(obj, rng) for _ in range(100)]
    assert all(((d > 0) | (obj == 0)).all() for d in draws)
    assert sum(iou(d, obj) < 1.0 for d in draws) >= 95


def test_forward_facing_reference_zero(orbit_scene):
    for seed in range(5):
        ms = sample_training_masks(orbit_scene, "forward_facing", np.random.default_rng(seed))
        assert not ms.masks[0].any() and ms.masks[1:].any(axis=(1, 2)).all()


def test_object_branch_covers_object(orbit_scene):
    rng = np.random.default_rng(0)
    for _ in range(30):
        ms = sample_training_masks(orbit_scene, "object_centric", rng)
        if ms.source == "object":
            assert ((ms.masks >= orbit_scene.object_masks)[1:]).all()
            assert not ms.masks[0].any()


def test_maskset_rejects_bad_reference():
    m = np.zeros((2, 4, 4), np.uint8)
    m[0, 1, 1] = 1
    with pytest.raises(MaskError):
        MaskSet(m, "object_centric")


def test_dilate_radius_zero_and_negative():
    m = _object()
    assert np.array_equal(dilate(m, 0), m)
    with pytest.raises(MaskError):
        dilate(m, -1)


def test_dilate_single_pixel_is_disc():
    m = np.zeros((21, 21), np.uint8)
    m[10, 10] = 1
    out = dilate(m, 5)
    for r in range(21):
        for c in range(21):
            assert out[r, c] == ((r - 10) ** 2 + (c - 10) ** 2 <= 25)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 6), st.integers(0, 6))
def test_dilate_monotone(seed, r1, r2):
    r1, r2 = min(r1, r2), max(r1, r2)
    m = (np.random.default_rng(seed).random((16, 16)) < 0.05).astype(np.uint8)
    a, b = dilate(m, r1), dilate(m, r2)
    assert (a <= b).all() and (m <= a).all()
