"""Command line interface: ``mvinpaint <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bundle_io as bio
from .config import RunConfig
from .geometry import BoxFootprint
from .inference import adapt_masks, bundle_caption, insert_object, interpolate_frames, remove_objects
from .masks import dilate, sample_training_masks
from .metrics import evaluate
from .scene import ObjectSpec, SceneSpec, render_scene


def _deterministic() -> None:
    if os.environ.get("MVI_DETERMINISTIC") == "1":
        import torch

        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_views(text: str, n: int) -> list[int]:
    if ".." in text:
        a, b = text.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(v) for v in text.split(",")] if text else list(range(1, n))


def _write_frames(root: Path, frames) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        bio.write_rgb_png(root / f"{i:03d}.png", f)


def _write_masks(root: Path, masks) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(masks):
        bio.write_mask_png(root / f"{i:03d}.png", m)


def _read_dir(root: Path, reader) -> np.ndarray:
    files = sorted(Path(root).glob("*.png"))
    if not files:
        raise SystemExit(f"no PNG files in {root}")
    return np.stack([reader(f) for f in files])


def _load_model(path):
    from .model import MVInpainter

    return MVInpainter.load(path)


def cmd_gen_data(args) -> None:
    out = _out(args)
    rng = np.random.default_rng(args.seed or 0)
    for i in range(args.num_scenes):
        obj = None
        if args.objects:
            obj = ObjectSpec(
                center=tuple(rng.uniform(-0.3, 0.3, 2)),
                size=tuple(rng.uniform(0.5, 0.9, 2)),
                height=float(rng.uniform(0.4, 0.9)),
                yaw_deg=float(rng.uniform(0, 90)),
                color=tuple(rng.uniform(0.1, 0.9, 3)),
                category=i % args.categories,
            )
        spec = SceneSpec(args.frames, args.resolution, args.trajectory, args.magnitude, plane_texture_seed=i,
                         object_spec=obj, rng_seed=args.seed or 0)
        bio.save_bundle(render_scene(spec), out / f"scene_{i:03d}")
    print(f"wrote {args.num_scenes} scenes to {out}")


def cmd_train(args) -> None:
    from .train import train

    cfg = _config(args)
    path = train(cfg, args.data, _out(args) / "model.ckpt", progress=True)
    print(f"checkpoint: {path}")


def cmd_sample(args) -> None:
    model = _load_model(args.ckpt)
    bundle = bio.load_bundle(args.scene)
    rng = np.random.default_rng(args.seed or 0)
    masks = sample_training_masks(bundle, model.mode, rng).masks
    flows = bundle.flows if model.uses_flow else None
    out = model.inpaint(bundle.frames, masks, flows, seed=args.seed or 0, caption=bundle_caption(bundle))
    root = _out(args)
    _write_frames(root / "frames", out)
    _write_masks(root / "masks", masks)


def cmd_remove(args) -> None:
    model = _load_model(args.ckpt)
    bundle = bio.load_bundle(args.scene)
    if args.masks:
        masks = _read_dir(args.masks, bio.read_mask_png)
    else:
        masks = np.stack([dilate(m, args.dilate) for m in bundle.object_masks])
        masks[0] = 0
    frames = bundle.frames.copy()
    if args.reference:
        frames[0] = bio.read_rgb_png(args.reference)
    ref_mask = dilate(bundle.object_masks[0], args.dilate) if args.self_inpaint_reference else None
    out = remove_objects(frames, masks, model, bundle.flows if model.uses_flow else None, seed=args.seed or 0,
                         reference_mask=ref_mask)
    root = _out(args)
    _write_frames(root / "frames", out)
    _write_masks(root / "masks", masks)


def cmd_adapt_mask(args) -> None:
    bundle = bio.load_bundle(args.scene)
    fp = BoxFootprint.from_json(json.loads(Path(args.landmarks).read_text()))
    views = _parse_views(args.views, bundle.num_frames)
    h, w = bundle.frames.shape[1:3]
    homs = np.stack([bundle.homographies[0]] + [bundle.homographies[v] for v in views])
    masks = adapt_masks(fp, homs, h, w, args.post, args.radius)
    root = _out(args)
    for v, m in zip(views, masks[1:]):
        bio.write_mask_png(root / f"{v:03d}.png", m)
    print(f"wrote {len(views)} masks to {root}")


def cmd_insert(args) -> None:
    model = _load_model(args.ckpt)
    bundle = bio.load_bundle(args.scene)
    fp = BoxFootprint.from_json(json.loads(Path(args.landmarks).read_text()))
    ref = bio.read_rgb_png(args.reference) if args.reference else bundle.frames[0]
    remover = _load_model(args.remove_ckpt) if args.remove_ckpt else None
    removal_masks = None
    if remover is not None:
        removal_masks = np.stack([dilate(m, 2) for m in bundle.object_masks])
        removal_masks[0] = 0
    res = insert_object(bundle.frames, ref, fp, model, bundle.homographies,
                        flows=bundle.flows if model.uses_flow else None, remover=remover,
                        removal_masks=removal_masks, skip_removal=remover is None, seed=args.seed or 0,
                        caption=bundle_caption(bundle))
    root = _out(args)
    _write_frames(root / "frames", res.frames)
    _write_masks(root / "masks", res.masks)


def cmd_interp(args) -> None:
    model = _load_model(args.ckpt)
    bundle = bio.load_bundle(args.scene)
    n = bundle.num_frames
    keys = list(range(0, n, args.every))
    masks = np.stack([dilate(m, 2) for m in bundle.object_masks])
    masks[0] = 0
    if args.keyframes:
        kf = _read_dir(args.keyframes, bio.read_rgb_png)
        key_results = dict(zip(keys, kf))
    else:
        flows = None
        sub = bundle.subsequence(keys)
        if model.uses_flow:
            flows = sub.flows
        res = model.inpaint(sub.frames, masks[keys], flows, seed=args.seed or 0, caption=bundle_caption(bundle))
        key_results = dict(zip(keys, res))
    out, windows = interpolate_frames(key_results, bundle.frames, masks, model, bundle, seed=args.seed or 0,
                                      caption=bundle_caption(bundle))
    root = _out(args)
    _write_frames(root / "frames", out)
    (root / "windows.json").write_text(json.dumps([{"fixed": w.fixed, "targets": w.targets} for w in windows]))


def _panel(frame_in, mask, frame_out, gt):
    rows = [frame_in, np.repeat(mask[..., None].astype(np.float32), 3, -1), frame_out]
    if gt is not None:
        err = np.abs(frame_out - gt).mean(-1, keepdims=True)
        rows.append(np.repeat(np.clip(err * 4, 0, 1), 3, -1))
    return np.concatenate(rows, axis=1)


def cmd_eval(args) -> None:
    bundle = bio.load_bundle(args.scene)
    gen = _read_dir(args.frames, bio.read_rgb_png)
    masks = _read_dir(args.masks, bio.read_mask_png)
    report = evaluate(gen, bundle, masks, ground_truth=not args.no_gt)
    root = _out(args)
    (root / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    gt = None if args.no_gt else bundle.frames
    for j in range(len(gen)):
        inp = bundle.frames[j] * (1 - masks[j][..., None])
        bio.write_rgb_png(root / f"panel_{j:03d}.png", _panel(inp, masks[j], gen[j], None if gt is None else gt[j]))
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "per_view"}))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="out")

    p = argparse.ArgumentParser(prog="mvinpaint", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render synthetic scene bundles")
    g.add_argument("--num-scenes", type=int, default=8)
    g.add_argument("--frames", type=int, default=24)
    g.add_argument("--resolution", type=int, default=32)
    g.add_argument("--trajectory", default="orbit")
    g.add_argument("--magnitude", type=float, default=3.0)
    g.add_argument("--objects", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--categories", type=int, default=4)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model on scene bundles")
    t.add_argument("--data", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="inpaint a scene with training-style masks")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("remove", parents=[common], help="remove the object from a scene")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--masks", help="directory of mask PNGs (default: dilated object masks)")
    r.add_argument("--reference", help="clean reference frame PNG replacing frame 0")
    r.add_argument("--dilate", type=int, default=2)
    r.add_argument("--self-inpaint-reference", action="store_true",
                   help="clean frame 0 with single-frame inpainting instead of trusting it")
    r.set_defaults(func=cmd_remove)

    i = sub.add_parser("insert", parents=[common], help="adapt box masks and insert an object")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--scene", required=True)
    i.add_argument("--landmarks", required=True)
    i.add_argument("--reference", help="edited reference frame PNG")
    i.add_argument("--remove-ckpt", help="forward-facing checkpoint for the removal stage")
    i.set_defaults(func=cmd_insert)

    a = sub.add_parser("adapt-mask", parents=[common], help="warp a box footprint into other views")
    a.add_argument("--scene", required=True)
    a.add_argument("--landmarks", required=True)
    a.add_argument("--views", default="")
    a.add_argument("--post", default="none", choices=["none", "dilate", "brush"])
    a.add_argument("--radius", type=int, default=5)
    a.set_defaults(func=cmd_adapt_mask)

    n = sub.add_parser("interp", parents=[common], help="inpaint keyframes then interpolate the rest")
    n.add_argument("--ckpt", required=True)
    n.add_argument("--scene", required=True)
    n.add_argument("--every", type=int, default=4)
    n.add_argument("--keyframes", help="directory of already inpainted keyframe PNGs")
    n.set_defaults(func=cmd_interp)

    e = sub.add_parser("eval", parents=[common], help="PSNR and cross-view consistency report")
    e.add_argument("--scene", required=True)
    e.add_argument("--frames", required=True)
    e.add_argument("--masks", required=True)
    e.add_argument("--no-gt", action="store_true", help="report consistency only")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    _deterministic()
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
