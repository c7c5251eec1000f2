"""Forward splatting of 2D Gaussians with front-to-back alpha blending.

Primitives are moved into the camera frame first (the camera sits at the
origin), each splat's tangent plane is intersected exactly with every
pixel ray, and splats are composited in order of centre depth with ties
broken by index.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .errors import DegenerateSplatError, EmptySceneError
from .scene import CameraModel, GaussianPrimitive2D, GaussianScene, quat_to_rotmat
from .sh import eval_sh_colors


@dataclass(frozen=True)
class RenderOptions:
    near: float = 0.01
    background: tuple = (0.0, 0.0, 0.0)
    track_contrib: bool = True
    tile_size: int = 16
    sigma_cut: float = 3.0
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.999
    t_min: float = 1e-4


@dataclass
class ScreenSplat:
    """Camera-frame plane data for one splat.

    ``center``/``axis_u``/``axis_v``/``normal_axis`` are the splat centre and
    unit tangent frame in camera coordinates; ``scale`` the tangential sigmas.
    """

    primitive_index: int
    mean_depth: float
    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    normal_axis: np.ndarray
    scale: np.ndarray
    bbox: tuple  # (x0, y0, x1, y1) inclusive pixel range
    pixel: np.ndarray  # projected centre

    def local_coords(self, ray):
        """``(s1, s2, depth)`` where the ray ``(x, y, 1)`` meets the plane."""
        nd = float(self.normal_axis @ ray)
        lam = float(self.normal_axis @ self.center) / nd
        q = lam * np.asarray(ray) - self.center
        return q @ self.axis_u / self.scale[0], q @ self.axis_v / self.scale[1], lam


@dataclass
class CameraFrame:
    """Primitives expressed relative to a camera placed at the origin."""

    positions: np.ndarray  # (P, 3)
    axes: np.ndarray  # (P, 3, 3), columns = tangent u, tangent v, normal
    view_dirs: np.ndarray  # (P, 3) world-frame unit directions camera -> splat


def pose_apply_inverse(scene: GaussianScene, cam: CameraModel) -> CameraFrame:
    """Apply the inverse camera pose to every splat; the scene is untouched."""
    Rc = cam.rotmat
    rel = scene.positions - cam.translation
    pos = rel @ Rc
    axes = np.einsum("ji,njk->nik", Rc, quat_to_rotmat(scene.rotations))
    norm = np.linalg.norm(rel, axis=1, keepdims=True)
    dirs = rel / np.where(norm > 0, norm, 1.0)
    return CameraFrame(pos, axes, dirs)


@dataclass
class Projection:
    """Vectorised screen splats for a whole scene."""

    valid: np.ndarray
    P: np.ndarray
    A0: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    SU: np.ndarray
    SV: np.ndarray
    OP: np.ndarray
    colors: np.ndarray
    raw_colors: np.ndarray
    normals: np.ndarray
    normal_sign: np.ndarray
    bbox: np.ndarray  # (P, 4) x0, y0, x1, y1 inclusive
    frame: CameraFrame


def _bboxes(P, A0, A1, su, sv, cam, opts):
    """Conservative pixel boxes around the sigma-cut square of each splat."""
    W, H = cam.resolution
    f = cam.focal
    cx, cy = cam.principal_point
    r = opts.sigma_cut
    corners = np.stack([P + sgn_u * r * su[:, None] * A0 + sgn_v * r * sv[:, None] * A1
                        for sgn_u in (-1, 1) for sgn_v in (-1, 1)], axis=1)
    z = corners[..., 2]
    in_front = np.all(z > opts.near, axis=1)
    zs = np.where(z > opts.near, z, 1.0)
    u = f * corners[..., 0] / zs + cx
    v = f * corners[..., 1] / zs + cy
    box = np.empty((len(P), 4))
    box[:, 0] = np.floor(u.min(1)) - 1
    box[:, 1] = np.floor(v.min(1)) - 1
    box[:, 2] = np.ceil(u.max(1)) + 1
    box[:, 3] = np.ceil(v.max(1)) + 1
    box[~in_front] = (0, 0, W - 1, H - 1)
    box[:, 0] = np.maximum(box[:, 0], 0)
    box[:, 1] = np.maximum(box[:, 1], 0)
    box[:, 2] = np.minimum(box[:, 2], W - 1)
    box[:, 3] = np.minimum(box[:, 3], H - 1)
    box = np.where(np.isfinite(box), box, 0)
    return box.astype(np.int64)


def project_scene(scene: GaussianScene, cam: CameraModel, opts: RenderOptions) -> Projection:
    frame = pose_apply_inverse(scene, cam)
    P = np.ascontiguousarray(frame.positions)
    A0 = np.ascontiguousarray(frame.axes[:, :, 0])
    A1 = np.ascontiguousarray(frame.axes[:, :, 1])
    A2 = np.ascontiguousarray(frame.axes[:, :, 2])
    su = scene.scales[:, 0].copy()
    sv = scene.scales[:, 1].copy()
    npd = np.einsum("ij,ij->i", A2, P)
    plen = np.linalg.norm(P, axis=1)
    valid = (P[:, 2] > opts.near) & (np.abs(npd) > 1e-12 * np.maximum(plen, 1e-300))
    bbox = _bboxes(P, A0, A1, su, sv, cam, opts)
    valid &= (bbox[:, 0] <= bbox[:, 2]) & (bbox[:, 1] <= bbox[:, 3])
    colors, raw = eval_sh_colors(scene.sh, frame.view_dirs)
    sign = np.where(npd > 0, -1.0, 1.0)
    normals = A2 * sign[:, None]
    return Projection(valid, P, A0, A1, A2, su, sv, scene.opacities.copy(),
                      np.ascontiguousarray(colors), raw, np.ascontiguousarray(normals), sign,
                      bbox, frame)


def project_primitive(p: GaussianPrimitive2D, cam: CameraModel, near: float = 0.01,
                      index: int = 0) -> Optional[ScreenSplat]:
    """Screen splat for one primitive, or ``None`` when culled."""
    if near <= 0:
        raise ValueError("near must be positive")
    scene = GaussianScene.from_primitives([p])
    opts = RenderOptions(near=near)
    pr = project_scene(scene, cam, opts)
    Pc = pr.P[0]
    if Pc[2] <= near:
        return None
    if abs(pr.A2[0] @ Pc) <= 1e-12 * np.linalg.norm(Pc):
        raise DegenerateSplatError("splat plane contains the camera centre")
    if not pr.valid[0]:
        return None
    f = cam.focal
    cx, cy = cam.principal_point
    pix = np.array([f * Pc[0] / Pc[2] + cx, f * Pc[1] / Pc[2] + cy])
    return ScreenSplat(index, float(Pc[2]), Pc, pr.A0[0], pr.A1[0], pr.A2[0],
                       np.array([pr.SU[0], pr.SV[0]]), tuple(int(v) for v in pr.bbox[0]), pix)


def splat_alpha(s: ScreenSplat, p: GaussianPrimitive2D, pixel, cam: CameraModel,
                opts: RenderOptions = RenderOptions()) -> float:
    """Opacity of one splat at a pixel, including the cut and clamp rules."""
    cx, cy = cam.principal_point
    ray = np.array([(pixel[0] - cx) / cam.focal, (pixel[1] - cy) / cam.focal, 1.0])
    s1, s2, lam = s.local_coords(ray)
    if lam <= opts.near or s1 * s1 + s2 * s2 > opts.sigma_cut ** 2:
        return 0.0
    a = min(p.opacity * np.exp(-0.5 * (s1 * s1 + s2 * s2)), opts.alpha_max)
    return a if a >= opts.alpha_min else 0.0


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), alpha-normalised
    normal: np.ndarray  # (H, W, 3), alpha-normalised, camera frame
    alpha: np.ndarray  # (H, W)
    distortion: np.ndarray  # (H, W) pairwise weight spread
    contrib: np.ndarray  # (P,) summed blend weights
    contrib_count: np.ndarray  # (P,) pixels blended
    transmittance: np.ndarray  # (H, W) final T
    camera: CameraModel
    options: RenderOptions
    scene_revision: int
    # bookkeeping for the backward pass
    projection: Projection = field(repr=False, default=None)
    tile_start: np.ndarray = field(repr=False, default=None)
    pair_splat: np.ndarray = field(repr=False, default=None)
    tiles_x: int = 0


def build_tile_lists(pr: Projection, cam: CameraModel, tile: int):
    """Sorted (tile, depth, index) pair list and per-tile offsets."""
    W, H = cam.resolution
    tiles_x = (W + tile - 1) // tile
    tiles_y = (H + tile - 1) // tile
    idx = np.nonzero(pr.valid)[0]
    b = pr.bbox[idx]
    tx0, ty0 = b[:, 0] // tile, b[:, 1] // tile
    tx1, ty1 = b[:, 2] // tile, b[:, 3] // tile
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    splat = np.repeat(idx, counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nxr = np.repeat(nx, counts)
    tile_id = (np.repeat(ty0, counts) + local // nxr) * tiles_x + np.repeat(tx0, counts) + local % nxr
    depth = pr.P[splat, 2]
    order = np.lexsort((splat, depth, tile_id))
    splat = np.ascontiguousarray(splat[order])
    tile_id = tile_id[order]
    tile_start = np.searchsorted(tile_id, np.arange(tiles_x * tiles_y + 1)).astype(np.int64)
    return tile_start, splat, tiles_x


def _kernel_args(pr: Projection, cam: CameraModel, opts: RenderOptions, tile_start, pair_splat,
                 tiles_x):
    W, H = cam.resolution
    cx, cy = cam.principal_point
    return (tile_start, pair_splat, tiles_x, opts.tile_size, W, H, cam.focal, cx, cy,
            pr.P, pr.A0, pr.A1, pr.A2, pr.SU, pr.SV, pr.OP, pr.colors, pr.normals,
            np.asarray(opts.background, dtype=np.float64),
            opts.near, opts.sigma_cut ** 2, opts.alpha_min, opts.alpha_max, opts.t_min)


def render(scene: GaussianScene, cam: CameraModel, opts: RenderOptions = RenderOptions()) -> RenderOutput:
    """Composite ``scene`` as seen from ``cam``."""
    if len(scene) == 0:
        raise EmptySceneError("cannot render an empty scene")
    if opts.near <= 0:
        raise ValueError("near must be positive")
    W, H = cam.resolution
    pr = project_scene(scene, cam, opts)
    tile_start, pair_splat, tiles_x = build_tile_lists(pr, cam, opts.tile_size)
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    normal = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    dist = np.zeros((H, W))
    T = np.ones((H, W))
    pair_w = np.zeros(len(pair_splat))
    pair_cnt = np.zeros(len(pair_splat), dtype=np.int64)
    _kernels.forward_tiles(*_kernel_args(pr, cam, opts, tile_start, pair_splat, tiles_x),
                           color, depth, normal, alpha, dist, T, pair_w, pair_cnt)
    n = len(scene)
    if opts.track_contrib:
        contrib = np.bincount(pair_splat, weights=pair_w, minlength=n)
        count = np.bincount(pair_splat, weights=pair_cnt, minlength=n)
    else:
        contrib = np.zeros(n)
        count = np.zeros(n)
    return RenderOutput(color, depth, normal, alpha, dist, contrib, count, T, cam, opts,
                        scene.revision, pr, tile_start, pair_splat, tiles_x)


def view_contributions(out: RenderOutput) -> np.ndarray:
    """Per-view term of the contribution score: mean blend weight over covered pixels."""
    return np.where(out.contrib_count > 0, out.contrib / np.maximum(out.contrib_count, 1), 0.0)


def accumulate_contributions(scene: GaussianScene, cams, opts: RenderOptions = RenderOptions()) -> np.ndarray:
    """Sum over views of each splat's pixel-normalised blend weight."""
    if len(scene) == 0:
        raise EmptySceneError("cannot score an empty scene")
    cams = list(cams)
    if not cams:
        raise ValueError("need at least one camera")
    opts = RenderOptions(**{**opts.__dict__, "track_contrib": True})
    total = np.zeros(len(scene))
    for cam in cams:
        total += view_contributions(render(scene, cam, opts))
    return total
