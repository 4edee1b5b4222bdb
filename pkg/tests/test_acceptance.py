"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Run ``python tests/test_acceptance.py`` to get the same lines without pytest.
Criteria 9 and 10 train small models and take several minutes each on CPU.
"""

import time

import numpy as np
import pytest
import torch

from mvinpaint.config import RunConfig
from mvinpaint.diffusion import DiffusionError, assemble_input, conditioning, ddim_sample, make_schedule
from mvinpaint.flow import SlotFusion, slot_attention
from mvinpaint.geometry import (
    MatchSet,
    adapt_box_mask,
    box_points,
    convex_hull,
    dlt_homography,
    footprint_from_bundle,
    ransac_homography,
    rasterize_convex,
    warp_points,
)
from mvinpaint.inference import (
    PipelineError,
    estimate_homographies,
    insert_object,
    interpolate_frames,
    plan_windows,
    remove_objects,
)
from mvinpaint.layers import Attention, TemporalAttention, lora_apply, ref_kv_attention
from mvinpaint.masks import dilate, iou, sample_training_masks
from mvinpaint.metrics import cross_view_warp_error, psnr
from mvinpaint.model import PixelCodec
from mvinpaint.scene import ObjectSpec, SceneSpec, plane_to_image, render_scene, warp_grid
from mvinpaint.train import train_model
from conftest import ACCEPTANCE_LINES
from helpers import tiny_model
from oracles import numeric_gradcheck, slot_attention_loops


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


def test_c01_slot_attention_normalization():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst_sum = worst_out = 0.0
    for i in range(100):
        d = (16, 64)[i % 2]
        n = (1, 64, 256)[i % 3]
        q, f = rng.normal(size=(4, d)), rng.normal(size=(n, d))
        w = [rng.normal(size=(d, d)) / np.sqrt(d) for _ in range(3)]
        out, attn = slot_attention(*(torch.tensor(x) for x in (q, f, *w)), return_attn=True)
        ref_out, _ = slot_attention_loops(q, f, *w)
        worst_sum = max(worst_sum, float((attn.sum(0) - 1).abs().max()))
        worst_out = max(worst_out, float(np.abs(out.numpy() - ref_out).max()))
    dt = time.time() - t0
    record(1, worst_sum < 1e-6 and worst_out < 1e-6 and dt < 10,
           f"max |colsum-1|={worst_sum:.1e}, max |out-loop|={worst_out:.1e}, {dt:.1f}s")


def test_c02_slot_attention_permutation_invariance():
    rng = np.random.default_rng(1)
    gen = torch.Generator().manual_seed(1)
    q = torch.randn(4, 64, generator=gen, dtype=torch.float64)
    w = [torch.randn(64, 64, generator=gen, dtype=torch.float64) / 8 for _ in range(3)]
    f = torch.randn(256, 64, generator=gen, dtype=torch.float64)
    base = slot_attention(q, f, *w)
    worst = max(float((slot_attention(q, f[rng.permutation(256)], *w) - base).abs().max()) for _ in range(50))
    record(2, worst < 1e-5, f"max |delta| over 50 permutations = {worst:.1e}")


def test_c03_gradient_checks():
    t0 = time.time()
    gen = torch.Generator().manual_seed(0)

    def rand(*s):
        return torch.randn(*s, generator=gen, dtype=torch.float64)

    def module_fn(mod, *inputs):
        names, params = zip(*mod.named_parameters())

        def fn(*args):
            state = dict(zip(names, args[len(inputs):]))
            return torch.func.functional_call(mod, state, tuple(args[: len(inputs)]))

        return fn, list(inputs) + list(params)

    errs = {}
    errs["slot_attention"] = numeric_gradcheck(slot_attention, [rand(3, 4), rand(5, 4), rand(4, 4), rand(4, 4), rand(4, 4)])
    fusion = SlotFusion(4, 3).double()
    fn, args = module_fn(fusion, rand(3, 4))
    errs["fuse_slots"] = numeric_gradcheck(fn, args)
    torch.manual_seed(0)
    attn = Attention(8, 2, lora_rank=2).double()
    with torch.no_grad():
        for m in (attn.to_q, attn.to_k, attn.to_v, attn.to_out):
            m.lora_B.normal_(0, 0.1)
    names, params = zip(*attn.named_parameters())
    errs["ref_kv_attention"] = numeric_gradcheck(
        lambda x, r, *ps: ref_kv_attention(_bind(attn, names, ps), x, r), [rand(1, 3, 8), rand(1, 3, 8), *params])
    temporal = TemporalAttention(8, 2, frame_capacity=6, zero_init=False).double()
    fn, args = module_fn(temporal, rand(1, 3, 2, 8))
    errs["temporal_attention"] = numeric_gradcheck(fn, args)
    errs["lora_apply"] = numeric_gradcheck(lambda w, b, a, bb, x: lora_apply(w, b, a, bb, 1.5, x),
                                           [rand(4, 3), rand(4), rand(2, 3), rand(4, 2), rand(5, 3)])
    dt = time.time() - t0
    worst = max(errs.values())
    record(3, worst < 1e-4 and dt < 120,
           "rel err " + ", ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f", {dt:.1f}s")


class _Bound(torch.nn.Module):
    """An Attention whose parameters are replaced by given tensors."""

    def __init__(self, attn, names, params):
        super().__init__()
        self.attn, self.state = attn, dict(zip(names, params))
        self.heads = attn.heads

    def forward(self, x, ref=None, context=None):
        return torch.func.functional_call(self.attn, self.state, (x,), {"ref": ref, "context": context})


def _bind(attn, names, params):
    return _Bound(attn, names, params)


def test_c04_ref_kv_reductions():
    torch.manual_seed(0)
    attn = Attention(16, 4, lora_rank=2)
    x, r = torch.randn(2, 10, 16), torch.randn(2, 10, 16)
    with torch.no_grad():
        disabled = torch.equal(ref_kv_attention(attn, x, r, enabled=False), attn(x))
        dup = float((ref_kv_attention(attn, x, x) - attn(x)).abs().max())
    record(4, disabled and dup < 1e-5, f"disabled bitwise={disabled}, duplicated max |delta|={dup:.1e}")


def test_c05_ddim_oracle_inversion():
    sched = make_schedule()
    z0 = PixelCodec(3).encode(np.random.default_rng(0).random((3, 8, 8, 3))).double()
    masks = np.zeros((3, 8, 8))
    masks[1:, 2:6, 2:6] = 1
    clean, m = conditioning(z0, masks)

    def oracle(x_in, t):
        x = x_in[..., :3]
        a = sched.abar(t, like=x)
        return (x - a.sqrt() * z0) / (1 - a).sqrt()

    errs = {}
    for steps in (1, 10, 50):
        out = ddim_sample(oracle, clean, m, sched, steps, eta=0.0, generator=torch.Generator().manual_seed(steps))
        errs[steps] = float((out - z0).abs().max())
    record(5, max(errs.values()) < 1e-4, "max |z0_hat - z0| " + ", ".join(f"steps={k}: {v:.1e}" for k, v in errs.items()))


def test_c06_input_assembly():
    z0 = PixelCodec(4).encode(np.random.default_rng(0).random((3, 8, 8, 3)))
    masks = np.zeros((3, 8, 8))
    masks[1, 1:4, 1:4] = 1
    masks[2] = 1
    a = assemble_input(z0, masks, 500, torch.randn_like(z0), make_schedule())
    nine = a.x.shape[-1] == 9
    ref = torch.equal(a.clean[0], z0[0])
    zero = not a.clean[2].any()
    record(6, nine and ref and zero, f"channels={a.x.shape[-1]}, frame0 clean==z0: {ref}, full-mask clean zero: {zero}")


def _random_homography(rng):
    h = np.eye(3)
    h[:2, :2] += rng.normal(0, 0.05, (2, 2))
    h[:2, 2] = rng.uniform(-4, 4, 2)
    h[2, :2] = rng.normal(0, 2e-3, 2)
    return h


def test_c07_homography_suite():
    t0 = time.time()
    rng = np.random.default_rng(0)
    src4 = np.array([[3.0, 5], [60, 2], [58, 61], [4, 55]])
    dlt_err = 0.0
    for _ in range(20):
        h = _random_homography(rng)
        dlt_err = max(dlt_err, float(np.abs(dlt_homography(src4, warp_points(h, src4)) - h / h[2, 2]).max()))
    size = 64.0
    corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]]) * size
    good = 0
    for seed in range(100):
        r = np.random.default_rng(1000 + seed)
        h = _random_homography(r)
        src = r.uniform(0, size, (100, 2))
        dst = warp_points(h, src) + r.normal(0, 1.0, (100, 2))
        out = r.choice(100, 30, replace=False)
        for i in out:
            while True:
                p = r.uniform(-8, size + 8, 2)
                if np.linalg.norm(p - warp_points(h, src[i : i + 1])[0]) > 5:
                    dst[i] = p
                    break
        est, _ = ransac_homography(MatchSet(np.c_[src, dst]), iters=1000, inlier_thresh_px=3.0, rng=r)
        err = np.linalg.norm(warp_points(est, corners) - warp_points(h, corners), axis=1).max()
        good += err < 2.0
    dt = time.time() - t0
    record(7, dlt_err < 1e-8 and good >= 95 and dt < 60,
           f"DLT max elem err={dlt_err:.1e}, RANSAC corner err < 2px in {good}/100 seeds, {dt:.1f}s")


def test_c08_mask_adaptation_end_to_end():
    rng = np.random.default_rng(0)
    scores = []
    for s in range(10):
        obj = ObjectSpec(center=tuple(rng.uniform(-0.2, 0.2, 2)), size=tuple(rng.uniform(0.5, 0.8, 2)),
                         height=float(rng.uniform(0.4, 0.8)), yaw_deg=float(rng.uniform(0, 90)))
        b = render_scene(SceneSpec(num_frames=5, resolution=64, trajectory="orbit", magnitude=float(rng.uniform(4, 8)),
                                   object_spec=obj, plane_texture_seed=s))
        fp = footprint_from_bundle(b)
        homs = estimate_homographies(b, n=100, noise_px=0.5, outlier_frac=0.1, rng=np.random.default_rng(s))
        scores.append(np.mean([iou(adapt_box_mask(fp, homs[j], 64, 64), b.object_masks[j]) for j in range(1, 5)]))
    static = render_scene(SceneSpec(num_frames=4, resolution=64, trajectory="static", object_spec=ObjectSpec()))
    fp = footprint_from_bundle(static)
    ref = rasterize_convex(convex_hull(box_points(fp.bottom, fp.height_px)), 64, 64)
    exact = all(np.array_equal(adapt_box_mask(fp, h, 64, 64), ref) for h in static.homographies)
    record(8, np.mean(scores) >= 0.8 and exact, f"mean IoU over 10 orbit scenes={np.mean(scores):.3f}, identity exact={exact}")


OVERFIT = {
    "model": {"base_channels": 32, "depth": 3, "ctx_dim": 32, "attn_levels": [2], "lora_rank": 4},
    "diffusion": {"output": "v"},
    "train": {"steps_phase1": 2000, "steps_phase2": 0, "lr": 1e-3, "lr_schedule": "cosine", "batch_size": 4,
              "phase1_frames": 12, "log_every": 0},
}


@pytest.mark.slow
def test_c09_overfit_smoke():
    torch.set_num_threads(1)
    t0 = time.time()
    b = render_scene(SceneSpec(num_frames=12, resolution=32, trajectory="orbit", magnitude=4, object_spec=ObjectSpec()))
    masks = sample_training_masks(b, "object_centric", np.random.default_rng(0)).masks
    cfg = RunConfig().update(OVERFIT)
    res = train_model([b], cfg, fixed_masks=[masks])
    out = res.model.inpaint(b.frames, masks, seed=0)
    score = psnr(out, b.frames, masks)
    dt = (time.time() - t0) / 60
    steps = len(res.losses)
    record(9, score >= 25 and steps <= 2000 and dt <= 60 and res.smoothed_loss() < 0.05,
           f"masked PSNR={score:.2f} dB after {steps} steps, final loss={res.smoothed_loss():.4f}, {dt:.1f} min CPU")


def ambiguity_suite(seed: int, textures: int = 1, frames: int = 6, magnitude: float = 15.0, radius: float = 0.5):
    """Mirrored orbit pairs around a textured disk; frame 0 and unmasked pixels coincide."""
    scenes, masks = [], []
    for t in range(textures):
        for sign in (1, -1):
            b = render_scene(SceneSpec(num_frames=frames, resolution=32, trajectory="orbit", magnitude=sign * magnitude,
                                       plane_texture_seed=100 * seed + t, texture_radius=radius))
            m = np.zeros(b.object_masks.shape, np.uint8)
            for j in range(1, frames):
                g = warp_grid(np.linalg.inv(plane_to_image(b.cameras[j])), 32, 32)
                m[j] = np.linalg.norm(g, axis=-1) < radius + 0.25
            scenes.append(b)
            masks.append(m)
    return scenes, masks


TREND = {
    "model": {"base_channels": 32, "depth": 3, "ctx_dim": 32, "attn_levels": [2]},
    "diffusion": {"output": "v"},
    "train": {"steps_phase1": 1200, "steps_phase2": 0, "lr": 1e-3, "lr_schedule": "cosine", "batch_size": 2,
              "phase1_frames": 6, "log_every": 0, "mode": "forward_facing", "frame_interval_range": [1, 1]},
    "sample": {"steps": 25},
}
TREND_SEEDS = 5


@pytest.mark.slow
def test_c10_flow_guidance_trend():
    torch.set_num_threads(1)
    errors = {"slot3d": [], "none": []}
    for seed in range(TREND_SEEDS):
        scenes, masks = ambiguity_suite(seed)
        for mode in errors:
            cfg = RunConfig().update(TREND).update({"train.seed": seed})
            if mode == "slot3d":
                cfg.update({"flow": {"mode": "slot3d", "inject": "cross_attn_token", "dim": 32}})
            model = train_model(scenes, cfg, fixed_masks=masks).model
            for b, m in zip(scenes, masks):
                out = model.inpaint(b.frames, m, b.flows if model.uses_flow else None, seed=seed)
                errors[mode].append(cross_view_warp_error(out, b, m))
    flow, none = np.median(errors["slot3d"]), np.median(errors["none"])
    record(10, flow < none, f"median cross-view warp error slot3d={flow:.4f} vs none={none:.4f} over {TREND_SEEDS} seeds")


def test_c11_pipeline_hygiene():
    b = render_scene(SceneSpec(num_frames=6, resolution=32, trajectory="translate", magnitude=0.1,
                               object_spec=ObjectSpec(center=(0.2, 0.1))))
    ff, oc = tiny_model(train={"mode": "forward_facing"}), tiny_model()
    rm = np.stack([dilate(o, 2) for o in b.object_masks])
    rm[0] = 0
    removed = remove_objects(b.frames, rm, ff)
    remove_ok = np.array_equal(removed[rm == 0], b.frames[rm == 0])
    ins = insert_object(b.frames, b.frames[0], footprint_from_bundle(b), oc, b.homographies, remover=ff,
                        removal_masks=rm, skip_removal=False)
    keep = (rm == 0) & (ins.masks == 0)
    insert_ok = np.array_equal(ins.frames[keep], b.frames[keep])
    windows_ok = all(len(w.fixed) <= 12 for n in (24, 48, 96) for w in plan_windows(list(range(0, n, 4)), n))
    keys = {i: b.frames[i] for i in (0, 3)}
    _, windows = interpolate_frames(keys, b.frames, rm, oc)
    windows_ok &= all(len(w.fixed) <= 12 for w in windows)
    bad = rm.copy()
    bad[0, 5, 5] = 1
    rejected = 0
    for call in (lambda: remove_objects(b.frames, bad, ff), lambda: oc.inpaint(b.frames, bad),
                 lambda: interpolate_frames({0: b.frames[0]}, b.frames, bad, oc),
                 lambda: conditioning(torch.zeros(6, 32, 32, 3), bad)):
        try:
            call()
        except (PipelineError, DiffusionError, ValueError):
            rejected += 1
    record(11, remove_ok and insert_ok and windows_ok and rejected == 4,
           f"remove outside-mask bitwise={remove_ok}, insert outside-mask bitwise={insert_ok}, "
           f"<=12 fixed per window={windows_ok}, nonzero masks[0] rejected {rejected}/4")


def test_c12_random_mask_ratio():
    b = render_scene(SceneSpec(num_frames=2, resolution=32, object_spec=ObjectSpec()))
    rng = np.random.default_rng(0)
    n = 10_000
    frac = sum(sample_training_masks(b, "object_centric", rng).source == "random" for _ in range(n)) / n
    record(12, 0.13 <= frac <= 0.17, f"pure-random fraction={frac:.4f} over {n} draws")


if __name__ == "__main__":
    import sys

    picks = [f"c{int(a):02d}" for a in sys.argv[1:]]
    extra = ["-k", " or ".join(picks)] if picks else []
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"] + extra))
