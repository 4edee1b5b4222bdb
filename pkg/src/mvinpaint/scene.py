"""Synthetic planar scenes with analytic ground truth.

A scene is a textured ground plane (world ``z = 0``) and an optional box or
billboard resting on it, seen by a pinhole camera that moves along a simple
trajectory. Because the support surface is a plane, every ground-truth quantity
(plane homographies, optical flow, footprint landmarks) is closed-form.

Pixel convention: pixel ``(row, col)`` has its center at ``(col + 0.5, row + 0.5)``
in continuous image coordinates ``(x, y)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

TRAJECTORIES = ("static", "translate", "orbit", "forward")

# camera rig shared by every trajectory
CAMERA_DISTANCE = 4.0
CAMERA_ELEVATION_DEG = 55.0
FOV_DEG = 40.0
SKY_COLOR = np.array([0.55, 0.65, 0.8])


class SceneError(ValueError):
    """Invalid scene specification or degenerate camera geometry."""


@dataclass(frozen=True)
class ObjectSpec:
    """Box (or thin billboard) standing on the ground plane."""

    center: tuple[float, float] = (0.0, 0.0)
    size: tuple[float, float] = (0.8, 0.6)
    height: float = 0.7
    yaw_deg: float = 20.0
    color: tuple[float, float, float] = (0.85, 0.25, 0.2)
    kind: str = "box"
    category: int = 0

    def extents(self) -> tuple[float, float, float]:
        sx, sy = self.size
        if self.kind == "billboard":
            sy = min(sy, 0.05)
        return sx, sy, self.height


@dataclass(frozen=True)
class SceneSpec:
    num_frames: int = 12
    resolution: int = 32
    trajectory: str = "orbit"
    magnitude: float = 3.0
    plane_texture_seed: int = 0
    object_spec: Optional[ObjectSpec] = None
    rng_seed: int = 0
    # textured disk of this radius around the origin, flat color outside; None = everywhere
    texture_radius: Optional[float] = None

    def validate(self) -> None:
        if self.num_frames < 2:
            raise SceneError(f"num_frames must be >= 2, got {self.num_frames}")
        if self.resolution < 16 or self.resolution % 8:
            raise SceneError(f"resolution must be >= 16 and a multiple of 8, got {self.resolution}")
        if self.trajectory not in TRAJECTORIES:
            raise SceneError(f"unknown trajectory {self.trajectory!r}")
        if self.object_spec is not None:
            o = self.object_spec
            if o.kind not in ("box", "billboard"):
                raise SceneError(f"unknown object kind {o.kind!r}")
            if min(o.size) <= 0 or o.height <= 0:
                raise SceneError("object size and height must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        obj = d.get("object_spec")
        if obj is not None:
            obj = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
            d["object_spec"] = ObjectSpec(**obj)
        return cls(**d)


@dataclass(frozen=True)
class Camera:
    K: np.ndarray
    R: np.ndarray  # world -> camera rotation, rows are (right, down, forward)
    center: np.ndarray

    def project(self, pts: np.ndarray) -> np.ndarray:
        """Project world points (n, 3) to pixel coordinates (n, 2)."""
        cam = (np.asarray(pts, float) - self.center) @ self.R.T
        if np.any(cam[:, 2] <= 1e-9):
            raise SceneError("point behind camera")
        uvw = cam @ self.K.T
        return uvw[:, :2] / uvw[:, 2:3]

    def rays(self, height: int, width: int) -> np.ndarray:
        """World-space ray directions through every pixel center, shape (H, W, 3)."""
        ys, xs = np.mgrid[0:height, 0:width].astype(float) + 0.5
        pix = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
        d_cam = pix @ np.linalg.inv(self.K).T
        return d_cam @ self.R


@dataclass(frozen=True)
class Plane:
    """Plane ``n . X + d = 0`` with an in-plane frame (origin, e1, e2)."""

    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.e1, self.e2)
        return n / np.linalg.norm(n)

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, float) - self.origin) @ self.normal


GROUND = Plane(np.zeros(3), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))


@dataclass
class SceneBundle:
    frames: np.ndarray  # (F, H, W, 3) in [0, 1]
    object_masks: np.ndarray  # (F, H, W) uint8
    plane_masks: np.ndarray  # (F, H, W) uint8
    flows: np.ndarray  # (F-1, H, W, 2), backward: frame i+1 -> frame i
    flow_valid: np.ndarray  # (F-1, H, W) bool
    homographies: np.ndarray  # (F, 3, 3), reference view -> view j
    bottom_landmarks: Optional[np.ndarray]  # (F, 4, 2) or None
    spec: SceneSpec
    cameras: list[Camera] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def has_object(self) -> bool:
        return self.spec.object_spec is not None and bool(self.object_masks.any())

    def pair_homography(self, src: int, dst: int) -> np.ndarray:
        """Plane homography mapping pixels of view ``src`` into view ``dst``."""
        h = self.homographies[dst] @ np.linalg.inv(self.homographies[src])
        return h / h[2, 2]

    def backward_flow(self, prev: int, nxt: int) -> tuple[np.ndarray, np.ndarray]:
        """Flow defined on frame ``nxt`` pointing into frame ``prev``."""
        h = self.pair_homography(nxt, prev)
        invalid = self.plane_masks[nxt] == 0
        flow, valid = analytic_flow(h, invalid)
        occluded = lands_on(self.object_masks[prev], flow, valid)
        flow[occluded] = 0.0
        return flow, valid & ~occluded

    def subsequence(self, indices: Sequence[int]) -> "SceneBundle":
        """Bundle restricted to ``indices``; the first index becomes the reference."""
        idx = [int(i) for i in indices]
        if len(idx) < 2:
            raise SceneError("a subsequence needs at least 2 frames")
        ref_inv = np.linalg.inv(self.homographies[idx[0]])
        homs = np.stack([self.homographies[i] @ ref_inv for i in idx])
        homs /= homs[:, 2:3, 2:3]
        sub = SceneBundle(
            frames=self.frames[idx],
            object_masks=self.object_masks[idx],
            plane_masks=self.plane_masks[idx],
            flows=np.zeros((0,)),
            flow_valid=np.zeros((0,)),
            homographies=homs,
            bottom_landmarks=None if self.bottom_landmarks is None else self.bottom_landmarks[idx],
            spec=self.spec,
            cameras=[self.cameras[i] for i in idx] if self.cameras else [],
        )
        pairs = [self.backward_flow(a, b) for a, b in zip(idx[:-1], idx[1:])]
        sub.flows = np.stack([p[0] for p in pairs])
        sub.flow_valid = np.stack([p[1] for p in pairs])
        return sub


# ---------------------------------------------------------------------------
# geometry


def intrinsics(resolution: int, fov_deg: float = FOV_DEG) -> np.ndarray:
    f = (resolution / 2) / np.tan(np.radians(fov_deg) / 2)
    c = resolution / 2
    return np.array([[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]])


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    center = np.asarray(center, float)
    fwd = np.asarray(target, float) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        raise SceneError("viewing direction parallel to up vector")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


def trajectory_cameras(spec: SceneSpec) -> list[Camera]:
    K = intrinsics(spec.resolution)
    elev = np.radians(CAMERA_ELEVATION_DEG)
    horiz, z = CAMERA_DISTANCE * np.cos(elev), CAMERA_DISTANCE * np.sin(elev)
    base = np.array([0.0, -horiz, z])
    cams = []
    for k in range(spec.num_frames):
        step = k * spec.magnitude
        if spec.trajectory == "static" or step == 0:
            c, tgt = base, np.zeros(3)
        elif spec.trajectory == "orbit":
            phi = np.radians(step)
            c = np.array([horiz * np.sin(phi), -horiz * np.cos(phi), z])
            tgt = np.zeros(3)
        elif spec.trajectory == "translate":
            shift = np.array([step, 0.0, 0.0])
            c, tgt = base + shift, shift
        else:  # forward
            fwd = -base / np.linalg.norm(base)
            c = base + step * fwd
            tgt = c + fwd
        if c[2] <= 0.05:
            raise SceneError(f"camera crosses the ground plane at frame {k}")
        cams.append(Camera(K, look_at(c, tgt), c))
    return cams


def plane_to_image(cam: Camera, plane: Plane = GROUND) -> np.ndarray:
    """Homography from in-plane coordinates (a, b, 1) to pixels of ``cam``."""
    if abs(plane.signed_distance(cam.center[None])[0]) < 1e-9:
        raise SceneError("plane passes through the camera center")
    m = np.stack([plane.e1, plane.e2, plane.origin - cam.center], axis=1)
    return cam.K @ cam.R @ m


def plane_homography(cam_i: Camera, cam_j: Camera, plane: Plane = GROUND) -> np.ndarray:
    """Homography mapping plane pixels of view i to view j, normalized ``h[2,2] = 1``."""
    h = plane_to_image(cam_j, plane) @ np.linalg.inv(plane_to_image(cam_i, plane))
    if not np.all(np.isfinite(h)) or abs(h[2, 2]) < 1e-12:
        raise SceneError("degenerate plane homography")
    return h / h[2, 2]


def pixel_grid(height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(float) + 0.5
    return np.stack([xs, ys], axis=-1)


def warp_grid(h: np.ndarray, height: int, width: int) -> np.ndarray:
    """Apply a homography to every pixel center; returns (H, W, 2)."""
    p = pixel_grid(height, width).reshape(-1, 2)
    q = np.c_[p, np.ones(len(p))] @ np.asarray(h, float).T
    return (q[:, :2] / q[:, 2:3]).reshape(height, width, 2)


def analytic_flow(h: np.ndarray, invalid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flow ``warp(h, x) - x`` on valid pixels; zero and flagged invalid elsewhere.

    Returns ``(flow, valid)`` with flow shaped (H, W, 2) as (dx, dy).
    """
    h = np.asarray(h, float)
    if h.shape != (3, 3) or not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) < 1e-12:
        raise SceneError("invalid homography")
    height, width = invalid.shape
    p = pixel_grid(height, width).reshape(-1, 2)
    q = np.c_[p, np.ones(len(p))] @ h.T
    denom = q[:, 2]
    valid = (~np.asarray(invalid, bool)).reshape(-1) & (np.abs(denom) > 1e-9)
    flow = np.zeros_like(p)
    flow[valid] = q[valid, :2] / denom[valid, None] - p[valid]
    return flow.reshape(height, width, 2), valid.reshape(height, width)


def bilinear_sample(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W[, C]) at continuous pixel coordinates (..., 2), edge-clamped."""
    height, width = img.shape[:2]
    x = np.clip(coords[..., 0] - 0.5, 0, width - 1)
    y = np.clip(coords[..., 1] - 0.5, 0, height - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx, fy = x - x0, y - y0
    if img.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def lands_on(mask: np.ndarray, flow: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Valid flows whose bilinear footprint in the target frame touches ``mask``."""
    height, width = mask.shape
    tgt = pixel_grid(height, width) + flow - 0.5
    hit = np.zeros_like(valid)
    for dc in (0, 1):
        for dr in (0, 1):
            col = np.clip(np.floor(tgt[..., 0]).astype(int) + dc, 0, width - 1)
            row = np.clip(np.floor(tgt[..., 1]).astype(int) + dr, 0, height - 1)
            hit |= valid & (mask[row, col] > 0)
    return hit


# ---------------------------------------------------------------------------
# appearance


class PlaneTexture:
    """Seeded sum-of-sinusoids texture, band-limited in world units."""

    def __init__(self, seed: int, n_waves: int = 16, band=(0.15, 0.7), radius=None):
        rng = np.random.default_rng(seed)
        freq = rng.uniform(*band, n_waves)
        theta = rng.uniform(0, 2 * np.pi, n_waves)
        self.freqs = np.stack([freq * np.cos(theta), freq * np.sin(theta)], axis=1)
        self.phase = rng.uniform(0, 2 * np.pi, (n_waves, 3))
        self.amp = rng.uniform(0.5, 1.0, (n_waves, 3)) / np.sqrt(n_waves) * 0.22
        self.base = rng.uniform(0.3, 0.7, 3)
        self.radius = radius

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        arg = 2 * np.pi * (xy @ self.freqs.T)  # (..., n_waves)
        waves = np.sin(arg[..., None] + self.phase)  # (..., n_waves, 3)
        detail = np.einsum("...kc,kc->...c", waves, self.amp)
        if self.radius is not None:
            r = np.linalg.norm(xy, axis=-1)
            # smooth falloff keeps the texture band-limited across the disk edge
            s = np.clip((self.radius - r) / 0.4 + 0.5, 0, 1)
            detail = detail * (s * s * (3 - 2 * s))[..., None]
        return np.clip(self.base + detail, 0, 1)


_FACE_SHADE = np.array([0.75, 0.9, 0.65, 0.8, 1.0, 0.5])  # -x, +x, -y, +y, top, bottom


def _box_hit(cam: Camera, dirs: np.ndarray, obj: ObjectSpec):
    """Ray/box slab intersection. Returns (t_hit, face index), t=inf on miss."""
    sx, sy, sz = obj.extents()
    yaw = np.radians(obj.yaw_deg)
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]])  # world -> box
    origin = rot @ (cam.center - np.array([obj.center[0], obj.center[1], 0.0]))
    d = dirs @ rot.T
    lo = np.array([-sx / 2, -sy / 2, 0.0])
    hi = np.array([sx / 2, sy / 2, sz])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = np.nanmax(tmin, axis=-1)
    t_far = np.nanmin(tmax, axis=-1)
    hit = (t_near <= t_far) & (t_far > 0)
    axis = np.nanargmax(tmin, axis=-1)
    side = np.take_along_axis(d, axis[..., None], -1)[..., 0] < 0  # entered through the high face
    face = axis * 2 + side.astype(int)
    t = np.where(hit, t_near, np.inf)
    return t, face


def box_corners(obj: ObjectSpec) -> np.ndarray:
    """World coordinates of the 8 box corners; the first 4 are the bottom face."""
    sx, sy, sz = obj.extents()
    yaw = np.radians(obj.yaw_deg)
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.array([[-sx / 2, -sy / 2], [sx / 2, -sy / 2], [sx / 2, sy / 2], [-sx / 2, sy / 2]])
    xy = local @ np.array([[c, s], [-s, c]]) + np.asarray(obj.center)
    bottom = np.c_[xy, np.zeros(4)]
    top = np.c_[xy, np.full(4, sz)]
    return np.concatenate([bottom, top])


def render_view(cam: Camera, spec: SceneSpec, texture: PlaneTexture):
    res = spec.resolution
    dirs = cam.rays(res, res)
    dz = dirs[..., 2]
    with np.errstate(divide="ignore"):
        t_plane = np.where(dz < -1e-12, -cam.center[2] / dz, np.inf)
    ground_xy = cam.center[:2] + t_plane[..., None] * dirs[..., :2]
    ground_xy = np.where(np.isfinite(t_plane)[..., None], ground_xy, 0.0)
    img = np.where(np.isfinite(t_plane)[..., None], texture(ground_xy), SKY_COLOR)
    plane_mask = np.isfinite(t_plane)
    obj_mask = np.zeros_like(plane_mask)
    if spec.object_spec is not None:
        t_box, face = _box_hit(cam, dirs, spec.object_spec)
        obj_mask = np.isfinite(t_box) & (t_box <= t_plane)
        shade = _FACE_SHADE[face][..., None] * np.asarray(spec.object_spec.color)
        img = np.where(obj_mask[..., None], shade, img)
        plane_mask &= ~obj_mask
    return img, obj_mask.astype(np.uint8), plane_mask.astype(np.uint8)


def render_scene(spec: SceneSpec) -> SceneBundle:
    """Render all views of ``spec`` with analytic flows, homographies and landmarks."""
    spec.validate()
    cams = trajectory_cameras(spec)
    # rng_seed drives texture selection when no explicit texture seed offset is wanted
    texture = PlaneTexture(spec.plane_texture_seed * 7919 + spec.rng_seed, radius=spec.texture_radius)
    views = [render_view(c, spec, texture) for c in cams]
    frames = np.stack([v[0] for v in views])
    object_masks = np.stack([v[1] for v in views])
    plane_masks = np.stack([v[2] for v in views])

    homs = np.stack([plane_homography(cams[0], c) for c in cams])
    for a, b in zip(homs[:-1], homs[1:]):
        pair = b @ np.linalg.inv(a)
        if np.linalg.cond(pair / pair[2, 2]) >= 1e6:
            raise SceneError("trajectory produces an ill-conditioned plane homography")

    landmarks = None
    if spec.object_spec is not None:
        bottom = box_corners(spec.object_spec)[:4]
        landmarks = np.stack([c.project(bottom) for c in cams])

    bundle = SceneBundle(
        frames=frames,
        object_masks=object_masks,
        plane_masks=plane_masks,
        flows=np.zeros((0,)),
        flow_valid=np.zeros((0,)),
        homographies=homs,
        bottom_landmarks=landmarks,
        spec=spec,
        cameras=cams,
    )
    pairs = [bundle.backward_flow(i, i + 1) for i in range(spec.num_frames - 1)]
    bundle.flows = np.stack([p[0] for p in pairs])
    bundle.flow_valid = np.stack([p[1] for p in pairs])
    if not np.all(np.isfinite(bundle.frames)) or not np.all(np.isfinite(bundle.flows)):
        raise SceneError("non-finite rendering output")
    return bundle


def box_silhouette(bundle: SceneBundle, view: int) -> np.ndarray:
    """Full (unoccluded) silhouette of the box in ``view``, as the renderer sees it."""
    return bundle.object_masks[view].astype(bool)
