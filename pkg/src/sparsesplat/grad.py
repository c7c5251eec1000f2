"""Analytic backward pass through the rasteriser, plus a finite-difference oracle."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .errors import StaleRenderError
from .raster import RenderOptions, _kernel_args, render
from .scene import CameraModel, GaussianScene, quat_rotmat_vjp, quat_to_rotmat
from .sh import sh_basis, sh_basis_jacobian


@dataclass
class GradientBuffer:
    """Gradients for one (scene, camera) backward pass.

    ``abs_pos_grad`` sums per-pixel screen-gradient norms, ``sum_pos_grad``
    sums the screen gradients themselves; the first bounds the norm of the
    second.
    """

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    cam_translation: np.ndarray
    cam_rotation: np.ndarray
    abs_pos_grad: np.ndarray
    sum_pos_grad: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 2)), np.zeros(n),
                   np.zeros((n, 16, 3)), np.zeros(3), np.zeros(4), np.zeros(n), np.zeros((n, 2)))

    def groups(self) -> dict:
        return {"position": self.position, "rotation": self.rotation, "scale": self.scale,
                "opacity": self.opacity, "sh": self.sh, "cam_translation": self.cam_translation,
                "cam_rotation": self.cam_rotation}

    def __iadd__(self, other: "GradientBuffer"):
        for name in ("position", "rotation", "scale", "opacity", "sh", "cam_translation",
                     "cam_rotation", "abs_pos_grad", "sum_pos_grad"):
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def scaled(self, s: float) -> "GradientBuffer":
        return GradientBuffer(*(getattr(self, n) * s for n in (
            "position", "rotation", "scale", "opacity", "sh", "cam_translation", "cam_rotation",
            "abs_pos_grad", "sum_pos_grad")))


def backward(scene: GaussianScene, cam: CameraModel, out, d_color=None, d_depth=None,
             d_normal=None, d_alpha=None, d_distortion=None) -> GradientBuffer:
    """Chain image-space gradients back to splat attributes and the camera pose."""
    if out.scene_revision != scene.revision or not out.camera.same_as(cam):
        raise StaleRenderError("render does not belong to this scene/camera")
    H, W = out.alpha.shape
    n = len(scene)

    def buf(x, shape):
        return np.zeros(shape) if x is None else np.ascontiguousarray(x, dtype=np.float64)

    d_color = buf(d_color, (H, W, 3))
    d_depth = buf(d_depth, (H, W))
    d_normal = buf(d_normal, (H, W, 3))
    d_alpha = buf(d_alpha, (H, W))
    d_distortion = buf(d_distortion, (H, W))
    gb = GradientBuffer.zeros(n)
    if not (d_color.any() or d_depth.any() or d_normal.any() or d_alpha.any() or d_distortion.any()):
        return gb

    pr = out.projection
    pair_g = np.zeros((len(out.pair_splat), K.N_SLOTS))
    K.backward_tiles(*_kernel_args(pr, cam, out.options, out.tile_start, out.pair_splat, out.tiles_x),
                     d_color, d_depth, d_normal, d_alpha, d_distortion, pair_g)
    # fixed-order reduction pair slots -> splats
    g = np.zeros((n, K.N_SLOTS))
    for j in range(K.N_SLOTS):
        g[:, j] = np.bincount(out.pair_splat, weights=pair_g[:, j], minlength=n)

    g_p = g[:, K.G_P:K.G_P + 3]
    g_A = np.stack([g[:, K.G_A0:K.G_A0 + 3], g[:, K.G_A1:K.G_A1 + 3], g[:, K.G_A2:K.G_A2 + 3]],
                   axis=2)  # columns like the camera-frame axes
    Rc = cam.rotmat
    frame = pr.frame
    rel = scene.positions - cam.translation

    # p = Rc^T (mu - t)
    g_mu = g_p @ Rc.T
    g_t = -g_mu.sum(0)
    # A = Rc^T Rq
    g_Rq = np.einsum("ij,njk->nik", Rc, g_A)
    Rq = quat_to_rotmat(scene.rotations)
    g_M = np.einsum("nij,nkj->ik", g_A, Rq) + g_p.T @ rel
    g_Rc = g_M.T

    # view-dependent colour
    g_raw = g[:, K.G_C:K.G_C + 3] * ((pr.raw_colors > 0) & (pr.raw_colors < 1))
    dirs = frame.view_dirs
    basis = sh_basis(dirs)
    gb.sh[:] = basis[:, :, None] * g_raw[:, None, :]
    g_Y = np.einsum("nkc,nc->nk", scene.sh, g_raw)
    g_dir = np.einsum("nk,nkd->nd", g_Y, sh_basis_jacobian(dirs))
    norm = np.linalg.norm(rel, axis=1, keepdims=True)
    g_rel = (g_dir - dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)) / np.where(norm > 0, norm, 1.0)
    g_mu += g_rel
    g_t -= g_rel.sum(0)

    gb.position[:] = g_mu
    gb.rotation[:] = quat_rotmat_vjp(scene.rotations, g_Rq)
    gb.scale[:, 0] = g[:, K.G_SU]
    gb.scale[:, 1] = g[:, K.G_SV]
    gb.opacity[:] = g[:, K.G_O]
    gb.cam_translation[:] = g_t
    gb.cam_rotation[:] = quat_rotmat_vjp(cam.rotation, g_Rc)
    gb.abs_pos_grad[:] = g[:, K.G_ABS]
    gb.sum_pos_grad[:] = g[:, K.G_SUM:K.G_SUM + 2]
    return gb


def abs_accumulate(per_pixel_screen_grads):
    """``(sum of norms, vector sum)`` of per-pixel screen-space gradients."""
    g = np.asarray(per_pixel_screen_grads, dtype=np.float64).reshape(-1, 2)
    return float(np.linalg.norm(g, axis=1).sum()), g.sum(0)


# ---------------------------------------------------------------------------
# finite differences

PARAM_GROUPS = ("position", "rotation", "scale", "opacity", "sh", "cam_translation", "cam_rotation")


def _perturbed(scene: GaussianScene, cam: CameraModel, group: str, index, delta: float):
    if group.startswith("cam_"):
        t = cam.translation.copy()
        q = cam.rotation.copy()
        if group == "cam_translation":
            t[index] += delta
        else:
            q[index] += delta
            q /= np.linalg.norm(q)
        return scene, cam.with_pose(t, q)
    attr = {"position": "positions", "rotation": "rotations", "scale": "scales",
            "opacity": "opacities", "sh": "sh"}[group]
    arr = getattr(scene, attr).copy()
    arr[index] += delta
    if group == "rotation":
        row = index[0]
        arr[row] /= np.linalg.norm(arr[row])
    return scene.replace(**{attr: arr}), cam


def numeric_gradients(scene: GaussianScene, cam: CameraModel, losses: dict, step: float = 1e-5,
                      opts: RenderOptions = RenderOptions(), groups=PARAM_GROUPS) -> dict:
    """Central differences of several render losses at once.

    ``losses`` maps a name to ``f(render_output) -> float``.  Each perturbed
    render is shared by all losses.  Returns ``{loss: {group: array}}``.
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    shapes = {"position": scene.positions.shape, "rotation": scene.rotations.shape,
              "scale": scene.scales.shape, "opacity": scene.opacities.shape, "sh": scene.sh.shape,
              "cam_translation": (3,), "cam_rotation": (4,)}
    result = {name: {g: np.zeros(shapes[g]) for g in groups} for name in losses}
    for group in groups:
        for index in np.ndindex(*shapes[group]):
            vals = []
            for sgn in (1.0, -1.0):
                s2, c2 = _perturbed(scene, cam, group, index, sgn * step)
                out = render(s2, c2, opts)
                vals.append({name: f(out) for name, f in losses.items()})
            for name in losses:
                result[name][group][index] = (vals[0][name] - vals[1][name]) / (2 * step)
    return result


def compare_gradients(analytic: GradientBuffer, numeric: dict, rel_tol=1e-3, abs_tol=1e-7) -> dict:
    """Max relative error per group, ignoring entries within ``abs_tol``."""
    report = {}
    groups = analytic.groups()
    for name, num in numeric.items():
        ana = groups[name]
        err = np.abs(ana - num)
        rel = err / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-300)
        rel = np.where(err < abs_tol, 0.0, rel)
        report[name] = float(rel.max()) if rel.size else 0.0
    return report


@dataclass
class FDReport:
    max_rel_error: dict
    tolerance: float

    @property
    def flagged(self):
        return [g for g, e in self.max_rel_error.items() if e > self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.flagged


def finite_diff_check(scene: GaussianScene, cam: CameraModel,
                      loss: Callable, step: float = 1e-5,
                      opts: RenderOptions = RenderOptions(),
                      analytic: Optional[GradientBuffer] = None, rel_tol: float = 1e-3,
                      abs_tol: float = 1e-7) -> FDReport:
    """Compare :func:`backward` against central differences for one loss.

    ``loss(render_output)`` must return ``(value, grads)`` where ``grads`` is a
    dict of image-space gradients accepted by :func:`backward`
    (``d_color``, ``d_depth``, ``d_normal``, ``d_alpha``, ``d_distortion``).
    Pass ``analytic`` to audit a precomputed (possibly corrupted) buffer.
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    if analytic is None:
        out = render(scene, cam, opts)
        _, grads = loss(out)
        analytic = backward(scene, cam, out, **grads)
    num = numeric_gradients(scene, cam, {"L": lambda o: loss(o)[0]}, step, opts)["L"]
    return FDReport(compare_gradients(analytic, num, rel_tol, abs_tol), rel_tol)
