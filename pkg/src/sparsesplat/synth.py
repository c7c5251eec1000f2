"""Deterministic synthetic fixtures: textured analytic surfaces seen from a sparse camera arc.

Images and depth maps are ray-cast against the analytic surfaces rather
than splatted, so every view sees the same texture at the same world
point.  Splatting a dense reference scene would not guarantee that: with
overlapping, nearly opaque splats the depth-sorted blend leans toward the
nearer splats, which shifts the texture differently per viewpoint.
A matching splat scene is still produced as the reference reconstruction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .metrics import PointCloud, TrajectoryPair
from .scene import (CameraModel, GaussianScene, ViewBundle, axis_angle_to_quat, look_at,
                    quat_multiply, rotmat_to_quat)
from .sh import SH_COEFFS, rgb_to_dc

SHAPES = ("plane", "box_room", "sphere", "corner")
SUBSAMPLES = 3  # rays per pixel along each axis, for edge anti-aliasing


@dataclass
class SynthConfig:
    shape: str = "plane"
    resolution: int = 128
    spacing: float = 0.05  # splat spacing of the reference scene, scene units
    n_views: int = 3
    arc_deg: float = 30.0  # total angular span of the training arc
    distance: float = 2.5
    rot_noise_deg: float = 0.0
    trans_noise_frac: float = 0.0  # fraction of the scene extent
    depth_noise: float = 0.0  # relative amplitude of smooth multiplicative depth error
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; choose from {SHAPES}")
        if self.n_views < 1 or self.resolution < 8:
            raise ValueError("need at least one view and 8 pixels")
        if self.spacing <= 0 or self.distance <= 0:
            raise ValueError("spacing and distance must be positive")


@dataclass
class SynthData:
    scene: GaussianScene  # reference splat scene on the true surface
    views: List[ViewBundle]  # training views with (possibly perturbed) cameras
    gt_cameras: List[CameraModel]
    heldout: ViewBundle  # ground-truth camera, never perturbed
    extent: float
    surface: np.ndarray  # dense samples of the whole true surface
    observed: PointCloud  # true surface points seen by the training cameras

    @property
    def trajectory(self) -> TrajectoryPair:
        return TrajectoryPair([v.camera for v in self.views], self.gt_cameras)


# ---------------------------------------------------------------------------
# texture and surfaces


class Texture:
    """Sum of plane waves with random directions, frequencies and per-channel phases."""

    def __init__(self, rng, waves: int = 10):
        d = rng.normal(size=(waves, 3))
        self.dirs = d / np.linalg.norm(d, axis=1, keepdims=True)
        self.freq = np.geomspace(0.8, 6.0, waves)
        self.amp = 0.3 / np.sqrt(waves)
        self.phase = rng.uniform(0, 2 * np.pi, (waves, 3))

    def __call__(self, p: np.ndarray) -> np.ndarray:
        arg = 2 * np.pi * (np.asarray(p) @ (self.dirs * self.freq[:, None]).T)
        col = 0.5 + self.amp * np.sin(arg[:, :, None] + self.phase[None]).sum(axis=1)
        return np.clip(col, 0.03, 0.97)


@dataclass
class Rect:
    origin: np.ndarray
    e_u: np.ndarray
    e_v: np.ndarray
    size_u: float
    size_v: float

    def __post_init__(self):
        self.origin, self.e_u, self.e_v = (np.asarray(a, dtype=np.float64) for a in
                                           (self.origin, self.e_u, self.e_v))

    @property
    def normal(self):
        return np.cross(self.e_u, self.e_v)

    def intersect(self, o, d):
        """Ray parameter of the first hit, ``inf`` on a miss."""
        n = self.normal
        den = d @ n
        safe = np.where(np.abs(den) > 1e-12, den, 1.0)
        t = ((self.origin - o) @ n) / safe
        p = o + t[:, None] * d - self.origin
        u = p @ self.e_u
        v = p @ self.e_v
        ok = (np.abs(den) > 1e-12) & (t > 0) & (u >= 0) & (u <= self.size_u) & (v >= 0) & (v <= self.size_v)
        return np.where(ok, t, np.inf)

    def samples(self, spacing):
        """Grid points and their frames; the frame's third axis is the normal."""
        u = np.arange(spacing / 2, self.size_u, spacing)
        v = np.arange(spacing / 2, self.size_v, spacing)
        uu, vv = np.meshgrid(u, v)
        pts = self.origin + uu.ravel()[:, None] * self.e_u + vv.ravel()[:, None] * self.e_v
        R = np.stack([self.e_u, self.e_v, self.normal], axis=1)
        return pts, np.tile(rotmat_to_quat(R), (len(pts), 1))


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def intersect(self, o, d):
        oc = o - self.center
        a = np.sum(d * d, axis=1)
        b = 2 * np.sum(d * oc, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius ** 2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 0, t0, t1)
        return np.where((disc >= 0) & (t > 0), t, np.inf)

    def samples(self, spacing):
        """Fibonacci-lattice points with tangent frames."""
        n = int(np.ceil(4 * np.pi * self.radius ** 2 / spacing ** 2))
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = np.pi * (1 + 5 ** 0.5) * i
        nrm = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
        a = np.where(np.abs(nrm[:, 0:1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
        e_u = np.cross(a, nrm)
        e_u /= np.linalg.norm(e_u, axis=1, keepdims=True)
        e_v = np.cross(nrm, e_u)
        R = np.stack([e_u, e_v, nrm], axis=2)
        return self.center + self.radius * nrm, np.array([rotmat_to_quat(r) for r in R])


def make_surfaces(shape: str) -> list:
    if shape == "plane":
        return [Rect((-1, -1, 0), (1, 0, 0), (0, 1, 0), 2, 2)]
    if shape == "corner":
        return [Rect((-1, -1, 0), (1, 0, 0), (0, 1, 0), 1, 2),
                Rect((0, -1, 0), (0, 0, -1), (0, 1, 0), 1, 2)]
    if shape == "box_room":
        return [Rect((-1, -1, 1), (1, 0, 0), (0, 1, 0), 2, 2),  # back wall z = 1
                Rect((-1, -1, -1), (0, 1, 0), (0, 0, 1), 2, 2),  # left wall x = -1
                Rect((1, -1, -1), (0, 0, 1), (0, 1, 0), 2, 2),  # right wall x = 1
                Rect((-1, 1, -1), (0, 0, 1), (1, 0, 0), 2, 2),  # floor y = 1
                Rect((-1, -1, -1), (1, 0, 0), (0, 0, 1), 2, 2)]  # ceiling y = -1
    if shape == "sphere":
        return [Sphere((0, 0, 0), 1.0)]
    raise ValueError(f"unknown shape {shape!r}")


def raycast(surfaces: Sequence, cam: CameraModel, texture: Texture, subsamples: int = SUBSAMPLES):
    """Colour, z-depth and full-coverage mask of the analytic scene.

    Colour averages ``subsamples**2`` rays per pixel.  Depth comes from the
    ray through the pixel centre, so planar depth is exact.
    """
    W, H = cam.width, cam.height
    f = cam.focal
    cx, cy = cam.principal_point
    R = cam.rotmat
    offs = (np.arange(subsamples) + 0.5) / subsamples - 0.5
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))

    def cast(du, dv):
        d = np.stack([(uu + du - cx) / f, (vv + dv - cy) / f, np.ones_like(uu)], axis=-1).reshape(-1, 3)
        dw = d @ R.T
        o = np.broadcast_to(cam.translation, dw.shape)
        t = np.full(len(dw), np.inf)
        for s in surfaces:
            t = np.minimum(t, s.intersect(o, dw))
        return t, o + np.where(np.isfinite(t), t, 0.0)[:, None] * dw

    color = np.zeros((H * W, 3))
    hits = np.zeros(H * W)
    for du in offs:
        for dv in offs:
            t, p = cast(du, dv)
            hit = np.isfinite(t)
            color[hit] += texture(p[hit])
            hits += hit
    color /= subsamples ** 2
    t, _ = cast(0.0, 0.0)
    # camera-frame rays have unit z, so the ray parameter is the z-depth
    mask = (hits == subsamples ** 2) & np.isfinite(t)
    depth = np.where(mask, t, 0.0)
    return color.reshape(H, W, 3), depth.reshape(H, W), mask.reshape(H, W)


# ---------------------------------------------------------------------------
# cameras


def _camera_poses(shape: str, n: int, arc_deg: float, distance: float, extra: List[float]):
    """Eyes on a horizontal arc looking at the scene; returns (eye, target) pairs."""
    angles = [0.0] if n == 1 else list(np.linspace(-arc_deg / 2, arc_deg / 2, n))
    angles += extra
    poses = []
    for a in angles:
        t = np.radians(a)
        if shape == "box_room":
            # inside the room, looking at the back wall
            eye = np.array([0.5 * np.sin(t), -0.05, -0.8])
            target = eye + np.array([np.sin(t) * 0.6, 0.05, 1.0])
        elif shape == "corner":
            s = 0.35 * distance * np.sin(t)
            eye = np.array([-0.6 * distance + s, -0.1, -0.6 * distance - s])
            target = np.zeros(3)
        else:
            eye = np.array([distance * np.sin(t), -0.15 * distance, -distance * np.cos(t)])
            target = np.zeros(3)
        poses.append((eye, target))
    return poses


def perturb_camera(cam: CameraModel, rng, rot_deg: float, trans: float) -> CameraModel:
    """Rotate by exactly ``rot_deg`` about a random axis and shift by exactly ``trans``."""
    if rot_deg == 0 and trans == 0:
        return cam
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    dq = axis_angle_to_quat(axis, np.radians(rot_deg))
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return cam.with_pose(cam.translation + trans * d, quat_multiply(cam.rotation, dq))


def smooth_noise(shape, rng, amplitude: float, cells: int = 4) -> np.ndarray:
    """Low-frequency multiplicative field ``1 + amplitude * n`` with ``|n| <= 1``."""
    H, W = shape
    coarse = rng.uniform(-1, 1, (cells + 1, cells + 1))
    y = np.linspace(0, cells, H)
    x = np.linspace(0, cells, W)
    y0 = np.minimum(y.astype(int), cells - 1)
    x0 = np.minimum(x.astype(int), cells - 1)
    fy = (y - y0)[:, None]
    fx = (x - x0)[None, :]
    top = coarse[y0][:, x0] * (1 - fx) + coarse[y0][:, x0 + 1] * fx
    bot = coarse[y0 + 1][:, x0] * (1 - fx) + coarse[y0 + 1][:, x0 + 1] * fx
    return 1.0 + amplitude * (top * (1 - fy) + bot * fy)


def mono_from_depth(depth: np.ndarray) -> np.ndarray:
    """Relative depth that preserves order but not scale or linearity."""
    return 0.5 * np.power(np.maximum(depth, 0.0), 0.8)


# ---------------------------------------------------------------------------


def synth_scene(cfg: SynthConfig = SynthConfig()) -> SynthData:
    """Reference scene, training views and a held-out view for ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    texture = Texture(rng)
    surfaces = make_surfaces(cfg.shape)
    parts = [s.samples(cfg.spacing) for s in surfaces]
    pts = np.concatenate([p[0] for p in parts])
    q = np.concatenate([p[1] for p in parts])
    dense = np.concatenate([s.samples(cfg.spacing / 3)[0] for s in surfaces])
    n = len(pts)
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_dc(texture(pts))
    scene = GaussianScene(pts, q, np.full((n, 2), 0.75 * cfg.spacing), np.full(n, 0.99), sh)
    extent = scene.extent()

    res = cfg.resolution
    focal = (0.6 if cfg.shape == "box_room" else 1.1) * res
    poses = _camera_poses(cfg.shape, cfg.n_views, cfg.arc_deg, cfg.distance, [cfg.arc_deg / 4])
    gt_cams = [CameraModel(focal, (res / 2, res / 2), (res, res), eye,
                           rotmat_to_quat(look_at(eye, target))) for eye, target in poses]
    bundles = [raycast(surfaces, cam, texture) for cam in gt_cams]

    views = []
    observed = []
    for i, cam in enumerate(gt_cams[: cfg.n_views]):
        color, depth, mask = bundles[i]
        observed.append(cam.camera_to_world(cam.pixel_rays()[mask] * depth[mask][:, None]))
        est = perturb_camera(cam, rng, cfg.rot_noise_deg, cfg.trans_noise_frac * extent)
        noisy = depth * smooth_noise(depth.shape, rng, cfg.depth_noise) if cfg.depth_noise > 0 else depth
        views.append(ViewBundle(color, est, mono_from_depth(depth), mask, noisy))
    color, depth, mask = bundles[-1]
    heldout = ViewBundle(color, gt_cams[-1], mono_from_depth(depth), mask, depth)
    return SynthData(scene, views, gt_cams[: cfg.n_views], heldout, extent, dense,
                     PointCloud(np.concatenate(observed)))


def coverage(data: SynthData) -> List[float]:
    """Fraction of each training image covered by the surface."""
    return [float(v.valid.mean()) for v in data.views]
