"""Training masks: random irregular strokes, rectangles, disturbed object masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np
from scipy import ndimage

MODES = ("object_centric", "forward_facing")
RANDOM_MASK_RATIO = 0.15


class MaskError(ValueError):
    pass


@dataclass
class MaskSet:
    masks: np.ndarray  # (F, H, W) uint8, 1 = inpaint
    mode: str
    source: str = "random"  # "random" or "object": which branch produced the masks

    def __post_init__(self):
        if self.masks[0].any():
            raise MaskError("reference mask must be identically zero")
        if not np.isin(self.masks, (0, 1)).all():
            raise MaskError("masks must be binary")


@dataclass(frozen=True)
class StrokeParams:
    """Random-walk brush strokes. Widths are in pixels at 256x256 and scaled with resolution."""

    strokes: tuple[int, int] = (1, 8)
    width: tuple[float, float] = (4.0, 32.0)
    vertices: tuple[int, int] = (4, 12)
    step: tuple[float, float] = (10.0, 60.0)
    coverage: tuple[float, float] = (0.05, 0.6)
    max_retries: int = 100
    scale_with_resolution: bool = True


@dataclass(frozen=True)
class RectParams:
    """Rectangle side lengths as fractions of the image side."""

    width: tuple[float, float] = (0.2, 0.7)
    height: tuple[float, float] = (0.2, 0.7)


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx * xx + yy * yy) <= r * r


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a Euclidean disc of ``radius`` pixels."""
    if radius < 0:
        raise MaskError(f"radius must be >= 0, got {radius}")
    mask = np.asarray(mask) > 0
    if radius == 0 or not mask.any():
        return mask.astype(np.uint8)
    return ndimage.binary_dilation(mask, structure=disc(radius)).astype(np.uint8)


def _draw_strokes(rng: np.random.Generator, height: int, width: int, p: StrokeParams, scale: float):
    canvas = np.zeros((height, width), np.uint8)
    for _ in range(rng.integers(p.strokes[0], p.strokes[1] + 1)):
        x, y = rng.uniform(0, width), rng.uniform(0, height)
        w = max(1, int(round(rng.uniform(*p.width) * scale)))
        angle = rng.uniform(0, 2 * np.pi)
        for _ in range(rng.integers(p.vertices[0], p.vertices[1] + 1)):
            angle += rng.normal(0, 0.8)
            length = rng.uniform(*p.step) * scale
            nx = np.clip(x + length * np.cos(angle), 0, width - 1)
            ny = np.clip(y + length * np.sin(angle), 0, height - 1)
            cv2.line(canvas, (int(x), int(y)), (int(nx), int(ny)), 1, w)
            x, y = nx, ny
    return canvas


def irregular_mask(rng: np.random.Generator, height: int, width: int, params: Optional[StrokeParams] = None):
    """Random brush-stroke mask whose coverage lies in ``params.coverage``."""
    p = params or StrokeParams()
    if min(p.width) <= 0:
        raise MaskError("stroke width must be positive")
    if p.strokes[0] < 1 or p.strokes[1] < p.strokes[0]:
        raise MaskError("invalid stroke count range")
    scale = min(height, width) / 256 if p.scale_with_resolution else 1.0
    lo, hi = p.coverage
    for _ in range(p.max_retries):
        m = _draw_strokes(rng, height, width, p, scale)
        cov = m.mean()
        if m.any() and lo <= cov <= hi:
            return m
    raise MaskError(f"no mask with coverage in [{lo}, {hi}] after {p.max_retries} retries")


def rect_mask(rng: np.random.Generator, height: int, width: int, params: Optional[RectParams] = None):
    """Axis-aligned rectangle with side fractions drawn from ``params``."""
    p = params or RectParams()
    if min(p.width) <= 0 or min(p.height) <= 0 or max(p.width) > 1 or max(p.height) > 1:
        raise MaskError("rectangle fractions must lie in (0, 1]")
    rw = max(1, int(round(rng.uniform(*p.width) * width)))
    rh = max(1, int(round(rng.uniform(*p.height) * height)))
    x0 = int(rng.integers(0, width - rw + 1))
    y0 = int(rng.integers(0, height - rh + 1))
    return box_mask(height, width, x0, y0, rw, rh)


def box_mask(height: int, width: int, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    if w < 1 or h < 1:
        raise MaskError("rectangle must be at least 1x1")
    m = np.zeros((height, width), np.uint8)
    m[max(y0, 0) : y0 + h, max(x0, 0) : x0 + w] = 1
    return m


def random_mask(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    if rng.random() < 0.5:
        return irregular_mask(rng, height, width)
    return rect_mask(rng, height, width)


def disturb_object_mask(object_mask: np.ndarray, rng: np.random.Generator, amplitude: float = 1.0):
    """Union of the object mask with random rectangles and strokes around it.

    ``amplitude`` scales the size of the added shapes relative to the object's
    bounding box; 0 returns the object mask unchanged.
    """
    obj = np.asarray(object_mask) > 0
    if not obj.any():
        raise MaskError("object mask is empty")
    if amplitude < 0:
        raise MaskError("amplitude must be >= 0")
    out = obj.astype(np.uint8)
    if amplitude == 0:
        return out
    height, width = obj.shape
    rows, cols = np.nonzero(obj)
    y0, y1, x0, x1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    bh, bw = y1 - y0, x1 - x0
    for _ in range(8):
        for _ in range(rng.integers(1, 4)):
            w = max(1, int(round(bw * amplitude * rng.uniform(0.3, 0.8))))
            h = max(1, int(round(bh * amplitude * rng.uniform(0.3, 0.8))))
            cx = rng.uniform(x0 - 0.25 * bw * amplitude, x1 + 0.25 * bw * amplitude)
            cy = rng.uniform(y0 - 0.25 * bh * amplitude, y1 + 0.25 * bh * amplitude)
            out |= box_mask(height, width, int(cx - w / 2), int(cy - h / 2), w, h)
        if rng.random() < 0.5:
            scale = max(max(bw, bh) * amplitude / 64, 0.25)
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            canvas = np.zeros_like(out)
            for _ in range(rng.integers(1, 3)):
                x, y = cx + rng.normal(0, bw / 2), cy + rng.normal(0, bh / 2)
                wd = max(1, int(round(rng.uniform(3.0, 8.0) * scale)))
                for _ in range(rng.integers(2, 5)):
                    ang = rng.uniform(0, 2 * np.pi)
                    ln = rng.uniform(8.0, 24.0) * scale
                    nx, ny = x + ln * np.cos(ang), y + ln * np.sin(ang)
                    cv2.line(canvas, (int(x), int(y)), (int(nx), int(ny)), 1, wd)
                    x, y = nx, ny
            out |= canvas
        if (out > obj).any():
            break
    return out


def sample_training_masks(bundle, mode: str, rng: np.random.Generator, random_ratio: float = RANDOM_MASK_RATIO) -> MaskSet:
    """Per-sequence training masks; frame 0 is never masked.

    In object-centric mode a single draw per sequence decides between pure
    random masks (probability ``random_ratio``) and disturbed object masks.
    """
    if mode not in MODES:
        raise MaskError(f"unknown mode {mode!r}")
    n, height, width = bundle.object_masks.shape
    masks = np.zeros((n, height, width), np.uint8)
    if mode == "forward_facing":
        for j in range(1, n):
            masks[j] = random_mask(rng, height, width)
        return MaskSet(masks, mode, "random")
    if not bundle.object_masks[1:].any():
        raise MaskError("object-centric masks need an object in the bundle")
    if rng.random() < random_ratio:
        for j in range(1, n):
            masks[j] = random_mask(rng, height, width)
        return MaskSet(masks, mode, "random")
    for j in range(1, n):
        if bundle.object_masks[j].any():
            masks[j] = disturb_object_mask(bundle.object_masks[j], rng)
        else:
            masks[j] = random_mask(rng, height, width)
    return MaskSet(masks, mode, "object")


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a) > 0, np.asarray(b) > 0
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)
