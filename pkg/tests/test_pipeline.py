import numpy as np
import pytest
import torch

from mvinpaint.config import RunConfig
from mvinpaint.geometry import adapt_box_mask, footprint_from_bundle
from mvinpaint.inference import (
    MAX_FIXED_CONDITIONS,
    PipelineError,
    adapt_masks,
    estimate_homographies,
    insert_object,
    interpolate_frames,
    plan_windows,
    remove_objects,
    self_inpaint_reference,
)
from mvinpaint.masks import dilate, iou
from mvinpaint.metrics import psnr
from mvinpaint.scene import ObjectSpec, SceneSpec, render_scene
from mvinpaint.train import train_model
from helpers import tiny_model


@pytest.fixture(scope="module")
def ff_model():
    return tiny_model(train={"mode": "forward_facing"})


@pytest.fixture(scope="module")
def oc_model():
    return tiny_model()


def _removal_masks(bundle, r=2):
    m = np.stack([dilate(o, r) for o in bundle.object_masks])
    m[0] = 0
    return m


def test_remove_touches_only_masked_pixels(translate_scene, ff_model):
    masks = _removal_masks(translate_scene)
    out = remove_objects(translate_scene.frames, masks, ff_model)
    keep = masks == 0
    assert np.array_equal(out[keep], translate_scene.frames[keep])
    assert not np.array_equal(out, translate_scene.frames)


def test_remove_empty_masks_is_identity(translate_scene, ff_model):
    out = remove_objects(translate_scene.frames, np.zeros(translate_scene.object_masks.shape, np.uint8), ff_model)
    assert np.array_equal(out, translate_scene.frames)


def test_remove_rejects_reference_mask_and_wrong_mode(translate_scene, ff_model, oc_model):
    masks = _removal_masks(translate_scene)
    bad = masks.copy()
    bad[0, 3, 3] = 1
    with pytest.raises(PipelineError):
        remove_objects(translate_scene.frames, bad, ff_model)
    with pytest.raises(PipelineError):
        remove_objects(translate_scene.frames, masks, oc_model)


def test_self_inpaint_reference_only_changes_mask(translate_scene):
    f, m = translate_scene.frames[0], dilate(translate_scene.object_masks[0], 1)
    out = self_inpaint_reference(f, m)
    assert np.array_equal(out[m == 0], f[m == 0])
    assert np.abs(out[m > 0] - f[m > 0]).max() > 0


def test_adapt_masks_identity_trajectory():
    b = render_scene(SceneSpec(num_frames=4, trajectory="static", object_spec=ObjectSpec()))
    fp = footprint_from_bundle(b)
    masks = adapt_masks(fp, b.homographies, 32, 32)
    ref = adapt_box_mask(fp, np.eye(3), 32, 32)
    assert not masks[0].any()
    assert all(np.array_equal(m, ref) for m in masks[1:])


def test_estimated_homographies_close_to_truth(orbit_scene_64):
    homs = estimate_homographies(orbit_scene_64, rng=np.random.default_rng(0))
    corners = np.array([[0, 0, 1], [64, 0, 1], [64, 64, 1], [0, 64, 1.0]])
    for est, gt in zip(homs, orbit_scene_64.homographies):
        a, b = corners @ est.T, corners @ gt.T
        assert np.abs(a[:, :2] / a[:, 2:] - b[:, :2] / b[:, 2:]).max() < 2.0


def test_insert_skip_removal_is_adaption_plus_insertion(orbit_scene, oc_model):
    b = orbit_scene
    fp = footprint_from_bundle(b)
    res = insert_object(b.frames, b.frames[0], fp, oc_model, b.homographies, seed=3)
    masks = adapt_masks(fp, b.homographies, 32, 32, "dilate", 2)
    assert np.array_equal(res.masks, masks)
    assert np.array_equal(res.background, b.frames)
    direct = oc_model.inpaint(b.frames, masks, seed=3)
    assert np.array_equal(res.frames, direct)
    keep = masks == 0
    assert np.array_equal(res.frames[keep], b.frames[keep])


def test_insert_with_removal_hygiene(translate_scene, ff_model, oc_model):
    b = translate_scene
    fp = footprint_from_bundle(b)
    rm = _removal_masks(b)
    res = insert_object(b.frames, b.frames[0], fp, oc_model, b.homographies, remover=ff_model,
                        removal_masks=rm, skip_removal=False)
    keep = (rm == 0) & (res.masks == 0)
    assert np.array_equal(res.frames[keep], b.frames[keep])
    with pytest.raises(PipelineError):
        insert_object(b.frames, b.frames[0], fp, oc_model, b.homographies, skip_removal=False)


def test_plan_windows_x4_from_six_keyframes():
    keys = list(range(0, 24, 4))
    windows = plan_windows(keys, 24)
    seen = []
    for w in windows:
        assert len(w.fixed) <= MAX_FIXED_CONDITIONS and w.fixed[0] == 0
        assert len(w.order) <= 24
        seen += w.targets
    assert sorted(seen) == sorted(set(range(24)) - set(keys))
    with pytest.raises(PipelineError):
        plan_windows(keys, 24, frame_capacity=12, max_fixed=12)
    with pytest.raises(PipelineError):
        plan_windows([1, 2], 5)


def test_plan_windows_long_sequence_caps_fixed():
    windows = plan_windows(list(range(0, 96, 4)), 96)
    assert all(len(w.fixed) <= 12 for w in windows)
    assert sorted(t for w in windows for t in w.targets) == [i for i in range(96) if i % 4]


def test_interpolate_all_keyframes_noop(orbit_scene, oc_model):
    keys = {i: orbit_scene.frames[i] * 0.5 for i in range(orbit_scene.num_frames)}
    out, windows = interpolate_frames(keys, orbit_scene.frames, _removal_masks(orbit_scene), oc_model)
    assert windows == [] and np.array_equal(out, np.stack(list(keys.values())))


def test_interpolate_keeps_fixed_frames(orbit_scene, oc_model):
    rng = np.random.default_rng(0)
    keys = {i: rng.random(orbit_scene.frames.shape[1:]).astype(np.float32) for i in (0, 3)}
    masks = _removal_masks(orbit_scene)
    out, windows = interpolate_frames(keys, orbit_scene.frames, masks, oc_model)
    for k, v in keys.items():
        assert np.array_equal(out[k], v)
    targets = [t for w in windows for t in w.targets]
    assert sorted(targets) == [1, 2, 4, 5]
    keep = masks == 0
    for t in targets:
        assert np.array_equal(out[t][keep[t]], orbit_scene.frames[t][keep[t]])


SMALL_FIT = {
    "model": {"base_channels": 32, "depth": 3, "ctx_dim": 32, "attn_levels": [2]},
    "diffusion": {"output": "v"},
    "train": {"steps_phase1": 1000, "steps_phase2": 0, "lr": 1e-3, "lr_schedule": "cosine", "batch_size": 2,
              "phase1_frames": 6, "log_every": 0},
}


def _fit(bundle, masks, mode):
    torch.set_num_threads(1)
    cfg = RunConfig().update(SMALL_FIT).update({"train.mode": mode})
    return train_model([bundle], cfg, fixed_masks=[masks]).model


@pytest.mark.slow
def test_removal_recovers_rendered_background():
    spec = dict(num_frames=6, resolution=32, trajectory="translate", magnitude=0.1)
    scene = render_scene(SceneSpec(**spec, object_spec=ObjectSpec(center=(0.2, 0.1))))
    background = render_scene(SceneSpec(**spec))
    masks = _removal_masks(scene)
    model = _fit(background, masks, "forward_facing")
    frames = scene.frames.copy()
    frames[0] = background.frames[0]
    out = remove_objects(frames, masks, model)
    assert psnr(out, background.frames, masks) >= 22


@pytest.mark.slow
def test_insertion_silhouette_matches_renderer():
    spec = dict(num_frames=6, resolution=32, trajectory="orbit", magnitude=4)
    scene = render_scene(SceneSpec(**spec, object_spec=ObjectSpec()))
    background = render_scene(SceneSpec(**spec))
    fp = footprint_from_bundle(scene)
    masks = adapt_masks(fp, scene.homographies, 32, 32, "dilate", 2)
    model = _fit(scene, masks, "object_centric")
    res = insert_object(background.frames, scene.frames[0], fp, model, scene.homographies)
    for j in range(1, 6):
        sil = np.abs(res.frames[j] - background.frames[j]).max(-1) > 0.1
        assert iou(sil, scene.object_masks[j] > 0) >= 0.6
