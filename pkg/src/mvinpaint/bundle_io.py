"""On-disk scene bundles.

Directory layout::

    frames/%03d.png         RGB, 8 bit
    object_masks/%03d.png   grayscale 0/255
    plane_masks/%03d.png    grayscale 0/255
    flows/%03d.mvfl         b"MVFL", uint32 H, uint32 W, H*W*2 float32 (dx, dy), little-endian
    meta.json               homographies, landmarks, spec echo, cameras

Frames are quantized to 8 bits on disk, so a reloaded bundle differs from the
rendered one by at most 1/510 per channel.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import Camera, SceneBundle, SceneSpec

FLOW_MAGIC = b"MVFL"


def write_flow(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype="<f4")
    h, w, c = flow.shape
    if c != 2:
        raise ValueError("flow must be (H, W, 2)")
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(flow).tobytes())


def read_flow(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: bad flow magic")
    h, w = struct.unpack("<II", data[4:12])
    arr = np.frombuffer(data[12:], dtype="<f4")
    if arr.size != h * w * 2:
        raise ValueError(f"{path}: expected {h * w * 2} values, found {arr.size}")
    return arr.reshape(h, w, 2).astype(np.float32)


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


def write_rgb_png(path, img: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)


def read_rgb_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def save_bundle(bundle: SceneBundle, root) -> Path:
    root = Path(root)
    for sub in ("frames", "object_masks", "plane_masks", "flows"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i in range(bundle.num_frames):
        write_rgb_png(root / "frames" / f"{i:03d}.png", bundle.frames[i])
        write_mask_png(root / "object_masks" / f"{i:03d}.png", bundle.object_masks[i])
        write_mask_png(root / "plane_masks" / f"{i:03d}.png", bundle.plane_masks[i])
    for i, f in enumerate(bundle.flows):
        write_flow(root / "flows" / f"{i:03d}.mvfl", f)
    meta = {
        "spec": bundle.spec.to_dict(),
        "homographies": bundle.homographies.tolist(),
        "bottom_landmarks": None if bundle.bottom_landmarks is None else bundle.bottom_landmarks.tolist(),
        "flow_valid_fraction": [float(v.mean()) for v in bundle.flow_valid],
        "cameras": [{"K": c.K.tolist(), "R": c.R.tolist(), "center": c.center.tolist()} for c in bundle.cameras],
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=1))
    return root


def load_bundle(root) -> SceneBundle:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    n = len(meta["homographies"])
    frames = np.stack([read_rgb_png(root / "frames" / f"{i:03d}.png") for i in range(n)])
    obj = np.stack([read_mask_png(root / "object_masks" / f"{i:03d}.png") for i in range(n)])
    plane = np.stack([read_mask_png(root / "plane_masks" / f"{i:03d}.png") for i in range(n)])
    flows = np.stack([read_flow(root / "flows" / f"{i:03d}.mvfl") for i in range(n - 1)])
    cams = [Camera(np.array(c["K"]), np.array(c["R"]), np.array(c["center"])) for c in meta.get("cameras", [])]
    lm = meta["bottom_landmarks"]
    bundle = SceneBundle(
        frames=frames,
        object_masks=obj,
        plane_masks=plane,
        flows=flows,
        flow_valid=np.zeros((0,)),
        homographies=np.array(meta["homographies"]),
        bottom_landmarks=None if lm is None else np.array(lm),
        spec=SceneSpec.from_dict(meta["spec"]),
        cameras=cams,
    )
    bundle.flow_valid = np.stack([bundle.backward_flow(i, i + 1)[1] for i in range(n - 1)])
    return bundle


def load_dataset(root) -> list[SceneBundle]:
    root = Path(root)
    dirs = sorted(p.parent for p in root.glob("*/meta.json"))
    if (root / "meta.json").exists():
        dirs = [root]
    return [load_bundle(d) for d in dirs]
