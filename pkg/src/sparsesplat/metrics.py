"""Reconstruction, pose and image-quality metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import losses
from .errors import (DegenerateConfigurationError, EmptyCloudError, EmptyMaskError,
                     EmptySceneError)
from .raster import RenderOptions, render
from .scene import CameraModel, GaussianScene, quat_to_rotmat, rotmat_to_quat


@dataclass
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)

    def transformed(self, scale, R, t) -> "PointCloud":
        return PointCloud(scale * self.points @ np.asarray(R).T + t, self.colors)


def chamfer_distance(a, b) -> float:
    """Symmetric mean nearest-neighbour Euclidean distance, halved per side."""
    pa = a.points if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64).reshape(-1, 3)
    pb = b.points if isinstance(b, PointCloud) else np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloudError("Chamfer distance needs two non-empty clouds")
    d_ab, i_ab = cKDTree(pb).query(pa)
    d_ba, i_ba = cKDTree(pa).query(pb)
    # recompute from the matched indices so the value does not depend on tree arithmetic
    d_ab = np.linalg.norm(pa - pb[i_ab], axis=1)
    d_ba = np.linalg.norm(pb - pa[i_ba], axis=1)
    return float(0.5 * d_ab.mean() + 0.5 * d_ba.mean())


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryPair:
    estimated: Sequence[CameraModel]
    ground_truth: Sequence[CameraModel]

    def __post_init__(self):
        if len(self.estimated) != len(self.ground_truth):
            raise ValueError("trajectories must have equal length")


@dataclass
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, X):
        return self.scale * np.asarray(X) @ self.rotation.T + self.translation

    def apply_camera(self, cam: CameraModel) -> CameraModel:
        R = self.rotation @ cam.rotmat
        return cam.with_pose(self.apply(cam.translation), rotmat_to_quat(R))

    def inverse(self) -> "Similarity":
        Rt = self.rotation.T
        return Similarity(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)


def umeyama(src, dst, with_scale=True) -> Similarity:
    """Least-squares similarity with ``dst ~ s R src + t`` (Umeyama 1991)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 3:
        raise DegenerateConfigurationError("need at least three correspondences")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    sv_src = np.linalg.svd(xs, compute_uv=False)
    if sv_src[1] <= 1e-10 * max(sv_src[0], 1e-300) or sv_src[0] == 0:
        raise DegenerateConfigurationError("camera centres are collinear or coincident")
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_s = (xs ** 2).sum() / n
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return Similarity(s, R, t)


def _anchor_points(cams, use_orientation: bool, length: float):
    pts = [c.translation for c in cams]
    if use_orientation:
        for c in cams:
            R = c.rotmat
            pts.extend(c.translation + length * R[:, j] for j in range(3))
    return np.array(pts)


def umeyama_align(traj: TrajectoryPair, use_orientation: bool = False) -> Similarity:
    """Similarity mapping estimated camera centres onto ground truth.

    Camera centres on a short arc barely constrain the rotation about their
    chord.  ``use_orientation`` adds, per camera, the tips of its three axes
    at a distance equal to the ground-truth trajectory radius (at least 1)
    as extra correspondences, which removes that ambiguity.
    """
    est = np.array([c.translation for c in traj.estimated])
    gt = np.array([c.translation for c in traj.ground_truth])
    if not use_orientation:
        return umeyama(est, gt)
    gt_len = max(float(np.linalg.norm(gt - gt.mean(0), axis=1).max()), 1.0)
    first = umeyama(est, gt) if len(est) >= 3 and _spread_ok(est) else None
    scale = first.scale if first is not None else 1.0
    src = _anchor_points(traj.estimated, True, gt_len / scale)
    dst = _anchor_points(traj.ground_truth, True, gt_len)
    return umeyama(src, dst)


def _spread_ok(x) -> bool:
    sv = np.linalg.svd(x - x.mean(0), compute_uv=False)
    return sv[0] > 0 and sv[1] > 1e-10 * sv[0]


def rotation_angle_deg(Ra, Rb) -> float:
    """Geodesic angle between two rotations.

    Uses atan2 of the skew and trace parts; arccos of the trace alone loses
    half the digits for small angles.
    """
    M = Ra.T @ Rb
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    c = 0.5 * (np.trace(M) - 1.0)
    return float(np.degrees(np.arctan2(s, c)))


def ate_rmse(traj: TrajectoryPair, align: bool = True, use_orientation: bool = False):
    """``(rotation RMSE in degrees, translation RMSE)`` after similarity alignment."""
    sim = (umeyama_align(traj, use_orientation) if align
           else Similarity(1.0, np.eye(3), np.zeros(3)))
    t_err = []
    r_err = []
    for e, g in zip(traj.estimated, traj.ground_truth):
        t_err.append(np.sum((sim.apply(e.translation) - g.translation) ** 2))
        r_err.append(rotation_angle_deg(sim.rotation @ e.rotmat, g.rotmat) ** 2)
    return float(np.sqrt(np.mean(r_err))), float(np.sqrt(np.mean(t_err)))


# ---------------------------------------------------------------------------
# images


def psnr(rendered, target, mask=None) -> float:
    """Peak signal-to-noise ratio for unit dynamic range; ``inf`` on exact match."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    m = np.ones(rendered.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMaskError("PSNR mask selects no pixels")
    mse = np.mean((rendered[m] - target[m]) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


ssim = losses.ssim


# ---------------------------------------------------------------------------
# surface samples


def voxel_downsample(points, voxel: float) -> np.ndarray:
    """Mean point per occupied voxel, ordered by voxel key."""
    if voxel <= 0 or len(points) == 0:
        return np.asarray(points)
    keys = np.floor(points / voxel).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    n = inv.max() + 1
    out = np.zeros((n, 3))
    for d in range(3):
        out[:, d] = np.bincount(inv, weights=points[:, d], minlength=n)
    return out / np.bincount(inv, minlength=n)[:, None]


def fuse_depth(scene: GaussianScene, cams: Sequence[CameraModel], trunc: float,
               opts: RenderOptions = RenderOptions(track_contrib=False)) -> PointCloud:
    """Unproject rendered depth of opaque pixels from every camera and merge."""
    cams = list(cams)
    if not cams:
        raise ValueError("need at least one camera")
    if len(scene) == 0:
        raise EmptySceneError("cannot fuse an empty scene")
    pts = []
    for cam in cams:
        out = render(scene, cam, opts)
        ok = out.alpha > 0.5
        Xc = cam.pixel_rays()[ok] * out.depth[ok][:, None]
        pts.append(cam.camera_to_world(Xc))
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    return PointCloud(voxel_downsample(pts, trunc))
