"""Multi-view consistent inpainting on synthetic planar scenes."""

from .config import RunConfig
from .geometry import BoxFootprint, adapt_box_mask, ransac_homography
from .inference import insert_object, interpolate_frames, remove_objects
from .masks import MaskSet, sample_training_masks
from .metrics import evaluate, psnr
from .model import MVInpainter
from .scene import ObjectSpec, SceneBundle, SceneSpec, render_scene

__version__ = "0.1.0"

__all__ = [
    "BoxFootprint",
    "MVInpainter",
    "MaskSet",
    "ObjectSpec",
    "RunConfig",
    "SceneBundle",
    "SceneSpec",
    "adapt_box_mask",
    "evaluate",
    "insert_object",
    "interpolate_frames",
    "psnr",
    "ransac_homography",
    "remove_objects",
    "render_scene",
    "sample_training_masks",
]
