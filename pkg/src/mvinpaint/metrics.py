"""PSNR and warp-based cross-view consistency (CVC) scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .scene import SceneBundle, bilinear_sample, lands_on, pixel_grid, warp_grid

PSNR_CAP = 99.0
# per-pixel photometric slack covering bilinear resampling of smooth ground truth
CVC_TOLERANCE = 4.0 / 255.0


def psnr(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None, max_val: float = 1.0) -> float:
    diff = (np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2
    if mask is not None:
        m = np.asarray(mask).astype(bool)
        if not m.any():
            return PSNR_CAP
        diff = diff[m]
    mse = float(diff.mean())
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(max_val**2 / mse))


def _in_bounds(coords: np.ndarray, height: int, width: int) -> np.ndarray:
    x, y = coords[..., 0], coords[..., 1]
    return (x >= 0.5) & (x <= width - 0.5) & (y >= 0.5) & (y <= height - 0.5)


def cvc_pair(gen_prev, gen_next, flow, valid, region, tol: float = CVC_TOLERANCE) -> Optional[float]:
    """Consistency of ``gen_next`` with ``gen_prev`` warped along the backward flow.

    Scores ``1 - mean(max(|d| - tol, 0)) / (1 - tol)`` over ``region`` pixels with a
    valid in-bounds flow; ``None`` when no such pixel exists.
    """
    height, width = region.shape
    coords = pixel_grid(height, width) + flow
    sel = region.astype(bool) & valid & _in_bounds(coords, height, width)
    if not sel.any():
        return None
    warped = bilinear_sample(gen_prev, coords)
    d = np.abs(warped - gen_next)[sel]
    return float(1 - np.maximum(d - tol, 0).mean() / (1 - tol))


def cross_view_warp_error(gen: np.ndarray, bundle: SceneBundle, masks: np.ndarray) -> float:
    """Mean absolute error between generated masked plane pixels and the reference
    view resampled through the ground-truth plane homography."""
    height, width = masks.shape[1:]
    errs = []
    for j in range(1, len(gen)):
        inv = np.linalg.inv(bundle.homographies[j])
        coords = warp_grid(inv, height, width)
        sel = masks[j].astype(bool) & (bundle.plane_masks[j] > 0) & _in_bounds(coords, height, width)
        flow = coords - pixel_grid(height, width)
        sel &= ~lands_on(bundle.object_masks[0], flow, sel)
        if sel.any():
            ref = bilinear_sample(bundle.frames[0], coords)
            errs.append(float(np.abs(gen[j] - ref)[sel].mean()))
    return float(np.mean(errs)) if errs else 0.0


@dataclass
class EvalReport:
    psnr_full: Optional[float]
    psnr_masked: Optional[float]
    cvc_mean: float
    cvc_min: float
    per_view: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(gen_frames: np.ndarray, bundle: SceneBundle, masks: np.ndarray, ground_truth: bool = True) -> EvalReport:
    """PSNR against the bundle's frames (when available) plus CVC along its flows."""
    gen = np.asarray(gen_frames, np.float64)
    masks = np.asarray(masks)
    if gen.shape[:3] != masks.shape or len(bundle.flows) != len(gen) - 1:
        raise ValueError("generated frames, masks and bundle do not align")
    gt = bundle.frames if ground_truth and bundle.frames is not None and len(bundle.frames) else None
    per_view = []
    scores = []
    for j in range(len(gen)):
        row = {"view": j, "masked_fraction": float(masks[j].mean())}
        if gt is not None:
            row["psnr"] = psnr(gen[j], gt[j])
            row["psnr_masked"] = psnr(gen[j], gt[j], masks[j]) if masks[j].any() else None
        if j > 0:
            s = cvc_pair(gen[j - 1], gen[j], bundle.flows[j - 1], bundle.flow_valid[j - 1], masks[j])
            row["cvc"] = s
            if s is not None:
                scores.append(s)
        per_view.append(row)
    cvc_mean = float(np.mean(scores)) if scores else 1.0
    cvc_min = float(np.min(scores)) if scores else 1.0
    psnr_full = psnr_masked = None
    if gt is not None:
        psnr_full = psnr(gen, gt)
        psnr_masked = psnr(gen, gt, masks) if masks.any() else PSNR_CAP
    return EvalReport(psnr_full, psnr_masked, cvc_mean, min(cvc_min, cvc_mean), per_view)
