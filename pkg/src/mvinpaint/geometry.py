"""Heuristic masking adaptation: plane homographies, box warping, hull masks.

The object's bottom face lies on the support plane, so it moves with the plane
homography between views. The top face is not on that plane; it is placed a
constant pixel height above the warped bottom face, and the mask is the filled
convex hull of all eight corners.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import masks as mk


class GeometryError(ValueError):
    pass


@dataclass
class MatchSet:
    pairs: np.ndarray  # (n, 4): x_ref, y_ref, x_tgt, y_tgt
    outlier: Optional[np.ndarray] = None  # generator bookkeeping, (n,) bool

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, float)
        if self.pairs.ndim != 2 or self.pairs.shape[1] != 4 or len(self.pairs) < 4:
            raise GeometryError("a match set needs at least 4 (x_ref, y_ref, x_tgt, y_tgt) rows")

    @property
    def src(self) -> np.ndarray:
        return self.pairs[:, :2]

    @property
    def dst(self) -> np.ndarray:
        return self.pairs[:, 2:]


@dataclass
class BoxFootprint:
    bottom: np.ndarray  # (4, 2) image points of the bottom face
    height_px: float

    def __post_init__(self):
        self.bottom = np.asarray(self.bottom, float).reshape(4, 2)
        if not self.height_px > 0:
            raise GeometryError("height_px must be positive")
        if polygon_area(convex_hull(self.bottom)) <= 0:
            raise GeometryError("bottom face is degenerate")

    @classmethod
    def from_json(cls, d: dict) -> "BoxFootprint":
        return cls(np.asarray(d["bottom"], float), float(d["height_px"]))

    def to_json(self) -> dict:
        return {"bottom": self.bottom.tolist(), "height_px": float(self.height_px)}


def normalize_homography(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, float)
    if not np.all(np.isfinite(h)) or abs(h[2, 2]) < 1e-12:
        raise GeometryError("homography cannot be normalized")
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) < 1e-12:
        raise GeometryError("singular homography")
    return h


def warp_points(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, float).reshape(-1, 2)
    q = np.c_[pts, np.ones(len(pts))] @ np.asarray(h, float).T
    if np.any(np.abs(q[:, 2]) <= 1e-9):
        raise GeometryError("point maps to infinity")
    return q[:, :2] / q[:, 2:3]


def _hartley(pts: np.ndarray):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise GeometryError("points coincide")
    s = np.sqrt(2) / d
    t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return (pts - c) * s, t


def _collinear_triple(pts: np.ndarray, tol: float = 1e-9) -> bool:
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a, b, c = pts[i], pts[j], pts[k]
                if abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) < tol:
                    return True
    return False


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares homography ``dst ~ H src`` by the normalized DLT."""
    src = np.asarray(src, float).reshape(-1, 2)
    dst = np.asarray(dst, float).reshape(-1, 2)
    if len(src) < 4 or len(src) != len(dst):
        raise GeometryError("need at least 4 point pairs")
    s, ts = _hartley(src)
    d, td = _hartley(dst)
    if len(src) == 4 and (_collinear_triple(s, 1e-6) or _collinear_triple(d, 1e-6)):
        raise GeometryError("three of the four points are collinear")
    n = len(s)
    a = np.zeros((2 * n, 9))
    x, y, u, v = s[:, 0], s[:, 1], d[:, 0], d[:, 1]
    one, zero = np.ones(n), np.zeros(n)
    a[0::2] = np.c_[x, y, one, zero, zero, zero, -u * x, -u * y, -u]
    a[1::2] = np.c_[zero, zero, zero, x, y, one, -v * x, -v * y, -v]
    _, sv, vt = np.linalg.svd(a)
    if sv[7] < 1e-10 * sv[0]:
        raise GeometryError("rank-deficient DLT system")
    hn = vt[-1].reshape(3, 3)
    return normalize_homography(np.linalg.inv(td) @ hn @ ts)


def reprojection_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    q = np.c_[src, np.ones(len(src))] @ h.T
    w = q[:, 2:3]
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.linalg.norm(q[:, :2] / w - dst, axis=1)
    return np.where(np.abs(w[:, 0]) > 1e-9, err, np.inf)


def _minimal_homographies(src: np.ndarray, dst: np.ndarray):
    """Normalized DLT for a batch of 4-point samples ``(B, 4, 2)``.

    Returns ``(H, ok)``; ``ok`` flags samples that are not degenerate under the
    same tests :func:`dlt_homography` applies.
    """
    b = len(src)
    ok = np.ones(b, bool)
    norm, tf_inv, tf = [], [], []
    for pts in (src, dst):
        c = pts.mean(axis=1, keepdims=True)
        d = np.linalg.norm(pts - c, axis=2).mean(axis=1)
        ok &= d > 1e-12
        sc = np.sqrt(2) / np.where(d > 1e-12, d, 1.0)
        norm.append((pts - c) * sc[:, None, None])
        t = np.zeros((b, 3, 3))
        t[:, 0, 0] = t[:, 1, 1] = sc
        t[:, :2, 2] = -sc[:, None] * c[:, 0]
        t[:, 2, 2] = 1
        ti = np.zeros((b, 3, 3))
        ti[:, 0, 0] = ti[:, 1, 1] = 1 / sc
        ti[:, :2, 2] = c[:, 0]
        ti[:, 2, 2] = 1
        tf.append(t)
        tf_inv.append(ti)
        for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
            a, u, v = norm[-1][:, i], norm[-1][:, j], norm[-1][:, k]
            ok &= np.abs((u[:, 0] - a[:, 0]) * (v[:, 1] - a[:, 1]) - (u[:, 1] - a[:, 1]) * (v[:, 0] - a[:, 0])) >= 1e-6
    (x, y), (u, v) = np.moveaxis(norm[0], 2, 0), np.moveaxis(norm[1], 2, 0)
    one, zero = np.ones_like(x), np.zeros_like(x)
    a = np.zeros((b, 8, 9))
    a[:, 0::2] = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=2)
    a[:, 1::2] = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=2)
    _, sv, vt = np.linalg.svd(a)
    ok &= sv[:, 7] >= 1e-10 * sv[:, 0]
    h = tf_inv[1] @ vt[:, -1].reshape(b, 3, 3) @ tf[0]
    ok &= np.abs(h[:, 2, 2]) >= 1e-12
    h = h / np.where(ok, h[:, 2, 2], 1.0)[:, None, None]
    ok &= np.abs(np.linalg.det(h)) >= 1e-12
    return h, ok


def _batch_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    q = np.einsum("bij,nj->bni", h, np.c_[src, np.ones(len(src))])
    w = q[..., 2]
    safe = np.abs(w) > 1e-9
    err = np.linalg.norm(q[..., :2] / np.where(safe, w, 1.0)[..., None] - dst, axis=2)
    return np.where(safe, err, np.inf)


def ransac_homography(
    matches: MatchSet,
    iters: int = 1000,
    inlier_thresh_px: float = 3.0,
    rng: Optional[np.random.Generator] = None,
    min_inliers: Optional[int] = None,
):
    """Robust homography from matches; returns ``(H, inlier_flags)``.

    All ``iters`` minimal samples are drawn and scored at once. The best model has
    the most inliers, ties going to the lower truncated residual sum. The
    consensus must exceed what a random minimal sample supports by itself:
    ``min_inliers`` defaults to ``max(8, ceil(0.2 n))``.
    """
    if iters < 1 or inlier_thresh_px <= 0:
        raise GeometryError("iters must be >= 1 and threshold > 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    src, dst = matches.src, matches.dst
    n = len(src)
    if min_inliers is None:
        min_inliers = max(8, int(np.ceil(0.2 * n)))
    min_inliers = min(max(min_inliers, 4), n)
    idx = np.argpartition(rng.random((iters, n)), 3, axis=1)[:, :4]
    hs, ok = _minimal_homographies(src[idx], dst[idx])
    if not ok.any():
        raise GeometryError("every minimal sample is degenerate")
    hs = hs[ok]
    err = _batch_errors(hs, src, dst)
    inl = err < inlier_thresh_px
    count = inl.sum(axis=1)
    trunc = np.minimum(err, inlier_thresh_px).sum(axis=1)
    k = np.lexsort((trunc, -count))[0]
    if count[k] < min_inliers:
        raise GeometryError(f"no consensus: best model has {count[k]} inliers, need {min_inliers}")
    best = inl[k]
    h = dlt_homography(src[best], dst[best])
    inliers = reprojection_error(h, src, dst) < inlier_thresh_px
    if inliers.sum() >= max(best.sum(), 4):
        h = dlt_homography(src[inliers], dst[inliers])
    else:
        inliers = best
    return h, inliers


def sample_plane_matches(bundle, view_j: int, n: int = 100, noise_px: float = 0.0, outlier_frac: float = 0.0, rng=None) -> MatchSet:
    """Synthetic plane matches between the reference view and ``view_j``.

    Inliers follow the ground-truth plane homography plus Gaussian noise;
    ``round(outlier_frac * n)`` of them get uniform random targets at least 5 px
    away from the true correspondence.
    """
    if n < 4:
        raise GeometryError("need n >= 4 matches")
    rng = rng if rng is not None else np.random.default_rng(0)
    height, width = bundle.plane_masks.shape[1:]
    h = bundle.homographies[view_j]
    rows, cols = np.nonzero(bundle.plane_masks[0])
    cand = np.c_[cols, rows] + 0.5
    tgt = warp_points(h, cand)
    ti = np.floor(tgt).astype(int)
    ok = (ti[:, 0] >= 0) & (ti[:, 0] < width) & (ti[:, 1] >= 0) & (ti[:, 1] < height)
    ok[ok] = bundle.plane_masks[view_j][ti[ok, 1], ti[ok, 0]] > 0
    cand = cand[ok] + rng.uniform(-0.5, 0.5, (int(ok.sum()), 2))
    # jitter can push a target just off the image; drop those
    tgt = warp_points(h, cand)
    cand = cand[(tgt[:, 0] >= 0) & (tgt[:, 0] <= width) & (tgt[:, 1] >= 0) & (tgt[:, 1] <= height)]
    if len(cand) < n:
        raise GeometryError(f"plane region has {len(cand)} usable pixels, need {n}")
    ref = cand[rng.choice(len(cand), n, replace=False)]
    true = warp_points(h, ref)
    noisy = true + rng.normal(0, noise_px, (n, 2)) if noise_px > 0 else true.copy()
    n_out = int(round(outlier_frac * n))
    outlier = np.zeros(n, bool)
    outlier[rng.choice(n, n_out, replace=False)] = True
    for i in np.nonzero(outlier)[0]:
        while True:
            p = rng.uniform(0, 1, 2) * [width, height]
            if np.linalg.norm(p - true[i]) > 5.0:
                noisy[i] = p
                break
    return MatchSet(np.c_[ref, noisy], outlier)


def convex_hull(pts: np.ndarray) -> np.ndarray:
    """Counter-clockwise convex hull (monotone chain), collinear points dropped."""
    pts = np.unique(np.asarray(pts, float).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        raise GeometryError("need at least 3 distinct points")

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        raise GeometryError("all points are collinear")
    return hull


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def rasterize_convex(poly: np.ndarray, height: int, width: int, eps: float = 1e-9) -> np.ndarray:
    """Pixels whose centers lie inside or on a CCW convex polygon."""
    ys, xs = np.mgrid[0:height, 0:width].astype(float) + 0.5
    inside = np.ones((height, width), bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        inside &= (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0]) >= -eps
    return inside.astype(np.uint8)


def box_points(bottom: np.ndarray, height_px: float) -> np.ndarray:
    """Bottom face plus the top face lifted ``height_px`` up the image."""
    top = bottom - np.array([0.0, height_px])
    return np.concatenate([bottom, top])


def adapt_box_mask(
    footprint: BoxFootprint,
    h: np.ndarray,
    height: int,
    width: int,
    post: str = "none",
    radius: int = 5,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Inpainting mask for the box in a target view related to the reference by ``h``.

    ``post`` is ``"none"``, ``"dilate"`` (disc of ``radius``) or ``"brush"``
    (union with random strokes around the hull).
    """
    bottom = warp_points(normalize_homography(h), footprint.bottom)
    if not np.all(np.isfinite(bottom)):
        raise GeometryError("warped bottom face is not finite")
    if abs(polygon_area(convex_hull(bottom))) < 1.0:
        raise GeometryError("warped bottom face is degenerate")
    hull = convex_hull(box_points(bottom, footprint.height_px))
    mask = rasterize_convex(hull, height, width)
    if post == "none":
        return mask
    if post == "dilate":
        return mk.dilate(mask, radius)
    if post == "brush":
        if not mask.any():
            return mask
        return mk.disturb_object_mask(mask, rng if rng is not None else np.random.default_rng(0), amplitude=0.5)
    raise GeometryError(f"unknown post-processing {post!r}")


def estimate_height_px(object_mask: np.ndarray, bottom: np.ndarray) -> float:
    """Pixel height of the object above its bottom face, read off a 2D mask."""
    rows = np.nonzero(np.asarray(object_mask).any(axis=1))[0]
    if len(rows) == 0:
        raise GeometryError("empty object mask")
    return max(float(np.min(bottom[:, 1]) - rows.min()), 1.0)


def footprint_from_bundle(bundle, view: int = 0) -> BoxFootprint:
    if bundle.bottom_landmarks is None:
        raise GeometryError("bundle has no object")
    bottom = bundle.bottom_landmarks[view]
    return BoxFootprint(bottom, estimate_height_px(bundle.object_masks[view], bottom))
