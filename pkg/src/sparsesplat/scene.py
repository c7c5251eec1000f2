"""Value types for splats, cameras and scenes plus rotation helpers."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import NonFiniteError, NonPositiveScaleError, ShapeMismatchError
from .sh import SH_COEFFS, eval_sh_colors

_revision = itertools.count(1)


# ---------------------------------------------------------------------------
# quaternions, (w, x, y, z) order


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_to_rotmat(q):
    """Rotation matrices for unit quaternions, shape ``(..., 3, 3)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotmat_vjp(q, gR):
    """Pull a gradient on ``R(q / |q|)`` back to ``q`` at unit ``q``.

    The result is tangent to the unit sphere, which is what a central
    difference with renormalisation after each perturbation measures.
    """
    q = np.asarray(q, dtype=np.float64)
    gR = np.asarray(gR, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = lambda i, j: gR[..., i, j]  # noqa: E731
    gw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    gx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    gy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    gz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    gq = np.stack([gw, gx, gy, gz], axis=-1)
    return gq - q * np.sum(gq * q, axis=-1, keepdims=True)


def rotmat_to_quat(R):
    """Unit quaternion (w >= 0) for a single rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


def axis_angle_to_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_multiply(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def look_at(eye, target, up=(0.0, -1.0, 0.0)):
    """Camera-to-world rotation for a +z-forward, y-down camera at ``eye``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(-np.asarray(up, dtype=np.float64), fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class GaussianPrimitive2D:
    """One flattened splat with linear-space scale and opacity."""

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    sh: np.ndarray  # (16, 3)

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(2))
        object.__setattr__(self, "sh", np.asarray(self.sh, dtype=np.float64).reshape(SH_COEFFS, 3))
        object.__setattr__(self, "opacity", float(self.opacity))


def validate_primitive(p: GaussianPrimitive2D) -> GaussianPrimitive2D:
    """Reject non-finite or non-positive-scale splats, renormalise rotation."""
    for name in ("position", "rotation", "scale", "sh"):
        if not np.all(np.isfinite(getattr(p, name))):
            raise NonFiniteError(f"{name} has non-finite entries")
    if not np.isfinite(p.opacity):
        raise NonFiniteError("opacity is non-finite")
    if np.any(p.scale <= 0):
        raise NonPositiveScaleError(f"scale must be positive, got {p.scale}")
    qn = np.linalg.norm(p.rotation)
    if qn == 0:
        raise NonFiniteError("zero quaternion")
    opacity = min(max(p.opacity, 0.0), 1.0)
    if abs(qn - 1.0) <= 1e-12 and opacity == p.opacity:
        return p
    return GaussianPrimitive2D(p.position, p.rotation / qn, p.scale, opacity, p.sh)


def sh_to_rgb(sh, view_dir):
    """Colour of one splat seen along unit ``view_dir``, clamped to [0, 1]."""
    sh = np.asarray(sh, dtype=np.float64).reshape(1, SH_COEFFS, 3)
    rgb, _ = eval_sh_colors(sh, np.asarray(view_dir, dtype=np.float64).reshape(1, 3))
    return rgb[0]


def tangent_frame(p: GaussianPrimitive2D):
    """Scaled tangent axes and unit normal of a splat in world space."""
    R = quat_to_rotmat(p.rotation)
    t_u = R[:, 0] * p.scale[0]
    t_v = R[:, 1] * p.scale[1]
    n = np.cross(t_u, t_v)
    return t_u, t_v, n / np.linalg.norm(n)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with a camera-to-world pose.

    ``rotation`` maps camera axes (x right, y down, z forward) into the world
    and ``translation`` is the camera centre, so a world point ``X`` sits at
    ``R.T @ (X - t)`` in camera coordinates.  Pixel ``(u, v)`` looks along
    ``((u - cx) / f, (v - cy) / f, 1)``.
    """

    focal: float
    principal_point: tuple
    resolution: tuple  # (width, height)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "principal_point", tuple(float(v) for v in self.principal_point))
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(self.translation))):
            raise NonFiniteError("camera pose has non-finite entries")
        object.__setattr__(self, "rotation", q / np.linalg.norm(q))
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        w, h = self.resolution
        cx, cy = self.principal_point
        if w < 1 or h < 1 or not (0 <= cx <= w and 0 <= cy <= h):
            raise ValueError("principal point must lie inside the image")

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def rotmat(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def with_pose(self, translation, rotation) -> "CameraModel":
        return CameraModel(self.focal, self.principal_point, self.resolution, translation, rotation)

    def downsampled(self, factor: int) -> "CameraModel":
        """Camera whose pixel ``(u, v)`` sees the centre of a ``factor``-block."""
        if factor == 1:
            return self
        cx, cy = self.principal_point
        off = (factor - 1) / 2.0
        w, h = self.width // factor, self.height // factor
        return CameraModel(self.focal / factor, ((cx - off) / factor, (cy - off) / factor),
                           (w, h), self.translation, self.rotation)

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions with unit z, shape ``(H, W, 3)``."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        cx, cy = self.principal_point
        return np.stack([(uu - cx) / self.focal, (vv - cy) / self.focal, np.ones_like(uu)], axis=-1)

    def world_to_camera(self, X):
        return (np.asarray(X) - self.translation) @ self.rotmat

    def camera_to_world(self, Xc):
        return np.asarray(Xc) @ self.rotmat.T + self.translation

    def same_as(self, other: "CameraModel") -> bool:
        return (self.focal == other.focal and self.principal_point == other.principal_point
                and self.resolution == other.resolution
                and np.array_equal(self.translation, other.translation)
                and np.array_equal(self.rotation, other.rotation))


class GaussianScene:
    """Struct-of-arrays splat collection.

    Treated as an immutable value: operations return new scenes.  Each
    instance carries a fresh ``revision`` so renders can detect staleness.
    """

    def __init__(self, positions, rotations, scales, opacities, sh, normalization=None):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64).reshape(n, 4)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64).reshape(n, 2)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float64).reshape(n)
        self.sh = np.ascontiguousarray(sh, dtype=np.float64).reshape(n, SH_COEFFS, 3)
        self.normalization: Optional[tuple] = normalization
        self.revision = next(_revision)

    def __len__(self):
        return self.positions.shape[0]

    def __repr__(self):
        return f"GaussianScene(n={len(self)}, revision={self.revision})"

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0),
                   np.zeros((0, SH_COEFFS, 3)))

    @classmethod
    def from_primitives(cls, prims: Sequence[GaussianPrimitive2D]) -> "GaussianScene":
        prims = [validate_primitive(p) for p in prims]
        if not prims:
            return cls.empty()
        return cls(np.stack([p.position for p in prims]), np.stack([p.rotation for p in prims]),
                   np.stack([p.scale for p in prims]), np.array([p.opacity for p in prims]),
                   np.stack([p.sh for p in prims]))

    def primitive(self, i: int) -> GaussianPrimitive2D:
        return GaussianPrimitive2D(self.positions[i], self.rotations[i], self.scales[i],
                                   self.opacities[i], self.sh[i])

    def primitives(self):
        return [self.primitive(i) for i in range(len(self))]

    def replace(self, **kw) -> "GaussianScene":
        args = dict(positions=self.positions, rotations=self.rotations, scales=self.scales,
                    opacities=self.opacities, sh=self.sh, normalization=self.normalization)
        args.update(kw)
        return GaussianScene(**args)

    def subset(self, idx) -> "GaussianScene":
        idx = np.asarray(idx)
        return GaussianScene(self.positions[idx], self.rotations[idx], self.scales[idx],
                             self.opacities[idx], self.sh[idx], self.normalization)

    def validate(self) -> "GaussianScene":
        """Vectorised equivalent of :func:`validate_primitive` on every splat."""
        for name in ("positions", "rotations", "scales", "opacities", "sh"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteError(f"{name} has non-finite entries")
        if np.any(self.scales <= 0):
            raise NonPositiveScaleError("scale must be positive")
        qn = np.linalg.norm(self.rotations, axis=1)
        if np.any(qn == 0):
            raise NonFiniteError("zero quaternion")
        return self.replace(rotations=self.rotations / qn[:, None],
                            opacities=np.clip(self.opacities, 0.0, 1.0))

    @staticmethod
    def concatenate(scenes: Sequence["GaussianScene"]) -> "GaussianScene":
        return GaussianScene(np.concatenate([s.positions for s in scenes]),
                             np.concatenate([s.rotations for s in scenes]),
                             np.concatenate([s.scales for s in scenes]),
                             np.concatenate([s.opacities for s in scenes]),
                             np.concatenate([s.sh for s in scenes]),
                             scenes[0].normalization if scenes else None)

    def extent(self) -> float:
        """Diagonal of the axis-aligned bounding box of splat centres."""
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.positions.max(0) - self.positions.min(0)))


@dataclass
class ViewBundle:
    """One input view.

    ``depth`` is metric depth (optional, used for initialisation) and
    ``mono_depth`` relative monocular depth (used only through orderings).
    """

    image: np.ndarray
    camera: CameraModel
    mono_depth: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        h, w = self.image.shape[:2]
        if self.image.shape != (h, w, 3):
            raise ShapeMismatchError("image must be HxWx3")
        if (w, h) != tuple(self.camera.resolution):
            raise ShapeMismatchError("image resolution differs from camera resolution")
        for name in ("mono_depth", "mask", "depth"):
            buf = getattr(self, name)
            if buf is not None and np.asarray(buf).shape != (h, w):
                raise ShapeMismatchError(f"{name} must be {h}x{w}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def valid(self) -> np.ndarray:
        m = np.ones(self.image.shape[:2], dtype=bool) if self.mask is None else self.mask.copy()
        return m

    def downsampled(self, factor: int) -> "ViewBundle":
        """Box-filtered copy matching :meth:`CameraModel.downsampled`."""
        if factor == 1:
            return self
        cam = self.camera.downsampled(factor)
        w, h = cam.resolution

        def pool(a):
            a = np.asarray(a, dtype=np.float64)[: h * factor, : w * factor]
            a = a.reshape(h, factor, w, factor, *a.shape[2:])
            return a.mean(axis=(1, 3))

        mask = None if self.mask is None else pool(self.mask) > 0.999
        return ViewBundle(pool(self.image), cam,
                          None if self.mono_depth is None else pool(self.mono_depth),
                          mask, None if self.depth is None else pool(self.depth))
