"""Removal, mask adaptation + insertion, and keyframe interpolation pipelines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import cv2
import numpy as np

from .geometry import BoxFootprint, GeometryError, adapt_box_mask, ransac_homography, sample_plane_matches
from .model import MVInpainter
from .scene import SceneBundle

MAX_FIXED_CONDITIONS = 12


class PipelineError(ValueError):
    pass


def _check_reference(masks: np.ndarray) -> None:
    if np.asarray(masks)[0].any():
        raise PipelineError("masks[0] must be all zero: the reference view is never inpainted")


def _float_frames(frames) -> np.ndarray:
    frames = np.asarray(frames)
    return frames if np.issubdtype(frames.dtype, np.floating) else frames.astype(np.float32)


def bundle_caption(bundle: Optional[SceneBundle]) -> int:
    """Caption id of a bundle's object category (0 without an object)."""
    if bundle is None or bundle.spec.object_spec is None:
        return 0
    return int(bundle.spec.object_spec.category)


def self_inpaint_reference(frame: np.ndarray, mask: np.ndarray, radius: int = 3) -> np.ndarray:
    """Single-frame fallback for a reference view that still shows the object.

    Classical fast-marching inpainting; only pixels under ``mask`` change.
    """
    m = np.asarray(mask) > 0
    if not m.any():
        return np.array(frame)
    img = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
    filled = cv2.inpaint(img, m.astype(np.uint8), radius, cv2.INPAINT_TELEA).astype(np.float32) / 255.0
    frame = np.asarray(frame)
    return np.where(m[..., None], filled.astype(frame.dtype), frame)


def remove_objects(frames, masks, model: MVInpainter, flows=None, seed: int = 0, caption=None,
                   reference_mask=None) -> np.ndarray:
    """Inpaint masked target views with a forward-facing model.

    Frame 0 must already be clean unless ``reference_mask`` is given, in which
    case it is cleaned first by :func:`self_inpaint_reference`.
    """
    _check_reference(masks)
    if model.mode != "forward_facing":
        raise PipelineError(f"object removal needs a forward-facing model, got {model.mode}")
    if reference_mask is not None:
        frames = np.array(frames, dtype=np.result_type(np.asarray(frames).dtype, np.float32))
        frames[0] = self_inpaint_reference(frames[0], reference_mask)
    return model.inpaint(frames, masks, flows, caption=caption, seed=seed)


def estimate_homographies(bundle: SceneBundle, n: int = 100, noise_px: float = 0.5, outlier_frac: float = 0.1,
                          rng: Optional[np.random.Generator] = None, iters: int = 1000, thresh: float = 3.0):
    """Reference-to-view plane homographies from RANSAC over sampled plane matches."""
    rng = rng if rng is not None else np.random.default_rng(0)
    homs = [np.eye(3)]
    for j in range(1, bundle.num_frames):
        matches = sample_plane_matches(bundle, j, n, noise_px, outlier_frac, rng)
        h, _ = ransac_homography(matches, iters, thresh, rng)
        homs.append(h)
    return np.stack(homs)


def adapt_masks(footprint: BoxFootprint, homographies: Sequence[np.ndarray], height: int, width: int,
                post: str = "none", radius: int = 5, rng=None) -> np.ndarray:
    """Adapted box masks for views 1..N; view 0 stays unmasked."""
    out = np.zeros((len(homographies), height, width), np.uint8)
    for j in range(1, len(homographies)):
        try:
            out[j] = adapt_box_mask(footprint, homographies[j], height, width, post, radius, rng)
        except GeometryError as exc:
            raise PipelineError(f"mask adaptation failed for view {j}: {exc}") from exc
    return out


@dataclass
class InsertResult:
    frames: np.ndarray
    masks: np.ndarray
    background: np.ndarray


def insert_object(frames, ref_edit_frame, footprint: BoxFootprint, model: MVInpainter, homographies,
                  flows=None, remover: Optional[MVInpainter] = None, removal_masks=None, skip_removal: bool = True,
                  post: str = "dilate", radius: int = 2, seed: int = 0, caption=None) -> InsertResult:
    """Removal (optional), per-view mask adaptation, then object-centric inpainting.

    ``ref_edit_frame`` replaces frame 0 and shows the inserted object.
    """
    frames = _float_frames(frames)
    if skip_removal:
        background = frames.copy()
    else:
        if remover is None or removal_masks is None:
            raise PipelineError("removal needs a forward-facing model and removal masks")
        background = remove_objects(frames, removal_masks, remover, flows, seed)
    height, width = frames.shape[1:3]
    masks = adapt_masks(footprint, homographies, height, width, post, radius)
    seq = background.copy()
    seq[0] = ref_edit_frame
    out = model.inpaint(seq, masks, flows, caption=caption, seed=seed)
    return InsertResult(out, masks, background)


@dataclass
class Window:
    fixed: list[int]
    targets: list[int]

    @property
    def order(self) -> list[int]:
        return self.fixed + self.targets


def plan_windows(keyframes: Sequence[int], num_frames: int, frame_capacity: int = 24,
                 max_fixed: int = MAX_FIXED_CONDITIONS) -> list[Window]:
    """Left-fixed interpolation windows.

    Each window holds up to ``max_fixed`` already inpainted frames, sampled
    uniformly over the finished set with frame 0 first, followed by the next
    not-yet-inpainted frames in index order up to ``frame_capacity`` in total.
    """
    done = sorted(set(int(k) for k in keyframes))
    if not done or done[0] != 0:
        raise PipelineError("keyframes must include frame 0")
    if done[-1] >= num_frames:
        raise PipelineError("keyframe index out of range")
    if max_fixed + 1 > frame_capacity or max_fixed < 1:
        raise PipelineError(f"a window with {max_fixed} fixed frames exceeds frame capacity {frame_capacity}")
    remaining = [i for i in range(num_frames) if i not in set(done)]
    windows = []
    while remaining:
        pick = np.unique(np.round(np.linspace(0, len(done) - 1, min(max_fixed, len(done)))).astype(int))
        fixed = [done[i] for i in pick]
        n_tgt = min(len(remaining), frame_capacity - len(fixed))
        targets, remaining = remaining[:n_tgt], remaining[n_tgt:]
        windows.append(Window(fixed, targets))
        done = sorted(done + targets)
    return windows


def interpolate_frames(key_results: dict, frames, masks, model: MVInpainter, bundle: Optional[SceneBundle] = None,
                       max_fixed: int = MAX_FIXED_CONDITIONS, seed: int = 0, caption=None):
    """Extend inpainted keyframes to the full sequence, window by window.

    ``key_results`` maps frame index to its inpainted frame. Fixed frames enter each
    window with an all-zero mask and are copied to the output unchanged.
    Returns ``(frames, windows)``.
    """
    frames = _float_frames(frames)
    masks = np.asarray(masks).astype(np.uint8)
    _check_reference(masks)
    n = len(frames)
    keys = sorted(int(k) for k in key_results)
    if len(keys) > n or (keys and keys[-1] >= n):
        raise PipelineError("keyframes must be a subset of the sequence")
    out = frames.copy()
    for k in keys:
        out[k] = key_results[k]
    if len(keys) == n:
        return out, []
    windows = plan_windows(keys, n, model.cfg.model.frame_capacity, max_fixed)
    for w, win in enumerate(windows):
        order = win.order
        seq = out[order].copy()
        seq[len(win.fixed):] = frames[win.targets]
        wmasks = np.zeros((len(order),) + masks.shape[1:], np.uint8)
        wmasks[len(win.fixed):] = masks[win.targets]
        flows = None
        if model.uses_flow:
            if bundle is None:
                raise PipelineError("a flow-conditioned model needs the scene bundle for window flows")
            flows = np.stack([bundle.backward_flow(a, b)[0] for a, b in zip(order[:-1], order[1:])])
        result = model.inpaint(seq, wmasks, flows, caption=caption, seed=seed + w)
        out[win.targets] = result[len(win.fixed):]
    return out, windows
