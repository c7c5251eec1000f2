"""Loss terms and their gradients with respect to rendered buffers.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
buffer it differentiates.  :func:`total_loss` bundles them per view into
the keyword gradients accepted by :func:`sparsesplat.grad.backward`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import EmptyMaskError, ImageTooSmallError, NoReferencesError, NoValidPairsError
from .scene import CameraModel

COS_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    w_l1: float = 0.8
    w_ssim: float = 0.2
    w_rank: float = 0.1
    w_smooth: float = 0.1
    w_mvs: float = 0.05
    w_normal: float = 0.05
    w_dist: float = 100.0
    margin: float = 1e-4
    n1: float = 1e-2
    n2: float = 1e-4
    patch_radius: int = 8
    samples: int = 4096

    def __post_init__(self):
        for name in ("w_l1", "w_ssim", "w_rank", "w_smooth", "w_mvs", "w_normal", "w_dist"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (self.margin > 0 and self.n1 > 0 and self.n2 > 0):
            raise ValueError("margin and edge thresholds must be positive")


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    return np.asarray(mask, dtype=bool)


# ---------------------------------------------------------------------------
# photometric


def loss_l1(rendered, target, mask=None):
    """Masked mean absolute error over pixels and channels."""
    m = _mask(mask, rendered.shape[:2])
    count = m.sum() * rendered.shape[2]
    if count == 0:
        raise EmptyMaskError("L1 mask selects no pixels")
    diff = rendered - target
    value = np.abs(diff)[m].sum() / count
    grad = np.sign(diff) * m[..., None] / count
    return float(value), grad


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' correlation over the first two axes."""
    out = sliding_window_view(img, len(g), axis=0) @ g
    out = sliding_window_view(out, len(g), axis=1) @ g
    return out


def _filter_adjoint(m, g):
    """Adjoint of :func:`_filter_valid` (zero-padded full correlation)."""
    r = len(g) - 1
    pad = [(r, r), (r, r)] + [(0, 0)] * (m.ndim - 2)
    return _filter_valid(np.pad(m, pad), g[::-1])


def _ssim_terms(x, y):
    g = _gauss_kernel()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    return g, mx, my, a1, a2, b1, b2


def ssim_map(x, y):
    """Per-window SSIM for ``(H, W[, C])`` images with unit dynamic range."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ImageTooSmallError(f"image smaller than the {SSIM_WINDOW}px SSIM window")
    _, _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return a1 * a2 / (b1 * b2)


def _window_mask(mask, shape):
    r = SSIM_WINDOW // 2
    m = _mask(mask, shape[:2])
    return m[r:shape[0] - r, r:shape[1] - r]


def ssim(x, y, mask=None) -> float:
    """Mean SSIM over windows whose centre pixel lies in ``mask``."""
    smap = ssim_map(x, y)
    wm = _window_mask(mask, np.shape(x))
    if not wm.any():
        raise EmptyMaskError("SSIM mask selects no windows")
    return float(smap[wm].mean())


def loss_ssim(rendered, target, mask=None):
    """``1 - SSIM`` and its gradient w.r.t. ``rendered``."""
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ImageTooSmallError(f"image smaller than the {SSIM_WINDOW}px SSIM window")
    g, mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    smap = a1 * a2 / (b1 * b2)
    wm = _window_mask(mask, x.shape)
    if not wm.any():
        raise EmptyMaskError("SSIM mask selects no windows")
    per = wm if smap.ndim == 2 else np.broadcast_to(wm[..., None], smap.shape)
    count = per.sum()
    value = 1.0 - smap[per].sum() / count
    # d(-mean S)/d(filtered statistics)
    dS = -per.astype(np.float64) / count
    d_mx = dS * (2 * my * a2 / (b1 * b2) - smap * 2 * mx / b1)
    d_sxx = dS * (-smap / b2)
    d_sxy = dS * (2 * a1 / (b1 * b2))
    # sxx = F(x^2) - mx^2 ; sxy = F(xy) - mx my
    d_mx_total = d_mx - 2 * mx * d_sxx - my * d_sxy
    grad = (_filter_adjoint(d_mx_total, g) + 2 * x * _filter_adjoint(d_sxx, g)
            + y * _filter_adjoint(d_sxy, g))
    return float(value), grad


# ---------------------------------------------------------------------------
# depth ordering


def sample_pairs(shape, samples: int, seed, radius: int = 8, mask=None):
    """Pixel pairs ``(p1, p2)`` as flat indices, ``p2`` within ``radius`` of ``p1``.

    A fixed seed reproduces the same pairs, so the same draw can be applied
    to the monocular and the rendered depth.
    """
    H, W = shape
    m = _mask(mask, shape)
    cand = np.flatnonzero(m)
    if cand.size == 0:
        raise NoValidPairsError("no valid pixels to sample")
    rng = np.random.default_rng(seed)
    p1 = cand[rng.integers(0, cand.size, samples)]
    off = rng.integers(-radius, radius + 1, (samples, 2))
    y = p1 // W + off[:, 0]
    x = p1 % W + off[:, 1]
    ok = (y >= 0) & (y < H) & (x >= 0) & (x < W) & ((off[:, 0] != 0) | (off[:, 1] != 0))
    p2 = np.where(ok, np.clip(y, 0, H - 1) * W + np.clip(x, 0, W - 1), 0)
    ok &= m.ravel()[p2]
    if not ok.any():
        raise NoValidPairsError("no valid pixel pairs")
    return p1[ok], p2[ok]


def loss_rank(d_render, d_mono, m=1e-4, samples=4096, seed=0, mask=None, radius=8, pairs=None):
    """Hinge on rendered depth orderings that contradict the monocular ordering."""
    p1, p2 = pairs if pairs is not None else sample_pairs(d_render.shape, samples, seed, radius, mask)
    dr = d_render.ravel()
    s_pre = np.sign(d_mono.ravel()[p1] - d_mono.ravel()[p2])
    s_re = dr[p1] - dr[p2]
    h = -s_pre * s_re + m
    active = h > 0
    n = len(p1)
    value = np.where(active, h, 0.0).sum() / n
    g = np.where(active, -s_pre, 0.0) / n
    grad = np.zeros(dr.size)
    np.add.at(grad, p1, g)
    np.add.at(grad, p2, -g)
    return float(value), grad.reshape(d_render.shape)


def loss_smooth(d_render, d_mono, n1=1e-2, n2=1e-4, samples=4096, seed=0, mask=None, radius=8,
                pairs=None):
    """Penalise rendered depth jumps where the monocular depth is flat."""
    p1, p2 = pairs if pairs is not None else sample_pairs(d_render.shape, samples, seed, radius, mask)
    dr = d_render.ravel()
    flat = np.abs(d_mono.ravel()[p1] - d_mono.ravel()[p2]) < n1
    diff = dr[p1] - dr[p2]
    h = np.abs(diff) - n2
    active = flat & (h > 0)
    n = len(p1)
    value = np.where(active, h, 0.0).sum() / n
    g = np.where(active, np.sign(diff), 0.0) / n
    grad = np.zeros(dr.size)
    np.add.at(grad, p1, g)
    np.add.at(grad, p2, -g)
    return float(value), grad.reshape(d_render.shape)


# ---------------------------------------------------------------------------
# features and multi-view alignment


def extract_features(image) -> np.ndarray:
    """Default 8-channel feature map: blurred RGB, Sobel x/y, local std at 3 scales."""
    img = np.asarray(image, dtype=np.float64)
    blur = np.stack([ndimage.gaussian_filter(img[..., c], 1.0, mode="nearest") for c in range(3)],
                    axis=-1)
    gray = img.mean(axis=-1)
    gx = ndimage.sobel(gray, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(gray, axis=0, mode="nearest") / 8.0
    stats = []
    for s in (1.0, 2.0, 4.0):
        mu = ndimage.gaussian_filter(gray, s, mode="nearest")
        var = ndimage.gaussian_filter(gray * gray, s, mode="nearest") - mu * mu
        stats.append(np.sqrt(np.maximum(var, 0.0)))
    return np.concatenate([blur, gx[..., None], gy[..., None], np.stack(stats, axis=-1)], axis=-1)


FeatureExtractor = Callable[[np.ndarray], np.ndarray]


@dataclass
class FeatureView:
    """A view's features with the camera used to reproject into it."""

    features: np.ndarray
    camera: CameraModel


def _bilinear(F, u, v):
    """Sample ``F`` at continuous pixel coords; returns values and d/du, d/dv."""
    H, W = F.shape[:2]
    x0 = np.clip(np.floor(u).astype(np.int64), 0, W - 2)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, H - 2)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]
    f00 = F[y0, x0]
    f01 = F[y0, x0 + 1]
    f10 = F[y0 + 1, x0]
    f11 = F[y0 + 1, x0 + 1]
    top = f00 + fx * (f01 - f00)
    bot = f10 + fx * (f11 - f10)
    val = top + fy * (bot - top)
    du = (f01 - f00) + fy * ((f11 - f10) - (f01 - f00))
    dv = bot - top
    return val, du, dv


@dataclass
class MVSResult:
    value: float
    grad: np.ndarray
    valid_count: int


def loss_mvs(depth, alpha, current: FeatureView, refs: Sequence[FeatureView], mask=None,
             near=0.01) -> MVSResult:
    """Cosine feature disagreement after warping references through rendered depth.

    Camera poses are treated as constants here; only the rendered depth
    receives a gradient.
    """
    if not refs:
        raise NoReferencesError("multi-view loss needs at least one reference view")
    cam = current.camera
    H, W = depth.shape
    valid = (alpha > 0.5) & (depth > near) & _mask(mask, depth.shape)
    ys, xs = np.nonzero(valid)
    rays = cam.pixel_rays()[ys, xs]
    D = depth[ys, xs]
    Fc = current.features[ys, xs]
    nc = np.maximum(np.linalg.norm(Fc, axis=1), COS_EPS)
    Xw = cam.camera_to_world(rays * D[:, None])
    dXw_dD = rays @ cam.rotmat.T

    grad_sum = np.zeros(len(D))
    total = 0.0
    count = 0
    for ref in refs:
        rc = ref.camera
        Rr = rc.rotmat
        Xr = (Xw - rc.translation) @ Rr
        dXr = dXw_dD @ Rr
        z = Xr[:, 2]
        zs = np.where(z > near, z, 1.0)
        u = rc.focal * Xr[:, 0] / zs + rc.principal_point[0]
        v = rc.focal * Xr[:, 1] / zs + rc.principal_point[1]
        Hr, Wr = ref.features.shape[:2]
        ok = (z > near) & (u >= 0) & (u <= Wr - 1) & (v >= 0) & (v <= Hr - 1)
        if not ok.any():
            continue
        idx = np.nonzero(ok)[0]
        Fr, dFu, dFv = _bilinear(ref.features, u[idx], v[idx])
        raw_nr = np.linalg.norm(Fr, axis=1)
        nr = np.maximum(raw_nr, COS_EPS)
        fc = Fc[idx]
        den = nr * nc[idx]
        dot = np.sum(Fr * fc, axis=1)
        cos = dot / den
        total += np.abs(1 - cos).sum()
        count += len(idx)
        g_cos = -np.sign(1 - cos)
        g_Fr = fc / den[:, None]
        g_Fr -= np.where(raw_nr > COS_EPS, dot / (nr ** 2 * den), 0.0)[:, None] * Fr
        g_Fr *= g_cos[:, None]
        g_u = np.sum(g_Fr * dFu, axis=1)
        g_v = np.sum(g_Fr * dFv, axis=1)
        x, y, zz = Xr[idx, 0], Xr[idx, 1], z[idx]
        dx, dy, dz = dXr[idx, 0], dXr[idx, 1], dXr[idx, 2]
        du = rc.focal * (dx * zz - x * dz) / zz ** 2
        dv = rc.focal * (dy * zz - y * dz) / zz ** 2
        np.add.at(grad_sum, idx, g_u * du + g_v * dv)
    grad = np.zeros((H, W))
    if count == 0:
        return MVSResult(0.0, grad, 0)
    grad[ys, xs] = grad_sum / count
    return MVSResult(float(total / count), grad, count)


# ---------------------------------------------------------------------------
# geometry regularisers on the rendered buffers


def depth_normals(depth, cam: CameraModel):
    """Camera-facing normals from central differences of unprojected depth.

    Returns ``(normals, cross, dX, dY)`` on the interior ``(H-2, W-2)`` grid.
    """
    X = depth[..., None] * cam.pixel_rays()
    dX = X[1:-1, 2:] - X[1:-1, :-2]
    dY = X[2:, 1:-1] - X[:-2, 1:-1]
    c = np.cross(dX, dY)
    norm = np.linalg.norm(c, axis=-1, keepdims=True)
    return -c / np.maximum(norm, 1e-20), c, dX, dY


def loss_normal(render, cam: Optional[CameraModel] = None):
    """Mean ``1 - n_render . n_depth`` over interior opaque pixels.

    Returns ``(value, d_normal, d_depth)``.
    """
    cam = render.camera if cam is None else cam
    D = render.depth
    H, W = D.shape
    d_normal = np.zeros((H, W, 3))
    d_depth = np.zeros((H, W))
    if H < 3 or W < 3:
        return 0.0, d_normal, d_depth
    op = render.alpha > 0.5
    valid = (op[1:-1, 1:-1] & op[1:-1, 2:] & op[1:-1, :-2] & op[2:, 1:-1] & op[:-2, 1:-1])
    n, c, dX, dY = depth_normals(D, cam)
    cn = np.linalg.norm(c, axis=-1)
    valid &= cn > 1e-20
    count = valid.sum()
    if count == 0:
        return 0.0, d_normal, d_depth
    N = render.normal[1:-1, 1:-1]
    value = np.sum((1.0 - np.sum(N * n, axis=-1))[valid]) / count
    wv = valid[..., None] / count
    d_normal[1:-1, 1:-1] = -n * wv
    g_n = -N * wv
    # n = -c/|c|
    g_c = -(g_n - n * np.sum(n * g_n, axis=-1, keepdims=True)) / np.maximum(cn, 1e-20)[..., None]
    g_dX = np.cross(dY, g_c)
    g_dY = np.cross(g_c, dX)
    g_X = np.zeros((H, W, 3))
    g_X[1:-1, 2:] += g_dX
    g_X[1:-1, :-2] -= g_dX
    g_X[2:, 1:-1] += g_dY
    g_X[:-2, 1:-1] -= g_dY
    d_depth = np.sum(g_X * cam.pixel_rays(), axis=-1)
    return float(value), d_normal, d_depth


def loss_distortion(render):
    """Mean over pixels of the per-ray pairwise weight spread."""
    H, W = render.distortion.shape
    return float(render.distortion.mean()), np.full((H, W), 1.0 / (H * W))


# ---------------------------------------------------------------------------


@dataclass
class LossResult:
    total: float
    terms: dict
    grads: dict = field(repr=False)  # keyword arguments for grad.backward


TERMS = ("l1", "ssim", "rank", "smooth", "mvs", "normal", "dist")


def total_loss(render, view, weights: LossWeights, current: Optional[FeatureView] = None,
               refs: Sequence[FeatureView] = (), seed=0) -> LossResult:
    """Weighted sum of every active term for one rendered view.

    Terms with zero weight are skipped.  Rank/smooth need ``view.mono_depth``
    and MVS needs ``current`` plus at least one reference.
    """
    H, W = render.depth.shape
    mask = view.valid
    d_color = np.zeros((H, W, 3))
    d_depth = np.zeros((H, W))
    d_normal = np.zeros((H, W, 3))
    d_dist = np.zeros((H, W))
    terms = {}
    total = 0.0

    if weights.w_l1 > 0:
        v, g = loss_l1(render.color, view.image, mask)
        terms["l1"] = v
        d_color += weights.w_l1 * g
    if weights.w_ssim > 0:
        v, g = loss_ssim(render.color, view.image, mask)
        terms["ssim"] = v
        d_color += weights.w_ssim * g
    if view.mono_depth is not None and (weights.w_rank > 0 or weights.w_smooth > 0):
        pairs = sample_pairs((H, W), weights.samples, seed, weights.patch_radius, mask)
        if weights.w_rank > 0:
            v, g = loss_rank(render.depth, view.mono_depth, weights.margin, pairs=pairs)
            terms["rank"] = v
            d_depth += weights.w_rank * g
        if weights.w_smooth > 0:
            v, g = loss_smooth(render.depth, view.mono_depth, weights.n1, weights.n2, pairs=pairs)
            terms["smooth"] = v
            d_depth += weights.w_smooth * g
    if weights.w_mvs > 0 and current is not None and refs:
        r = loss_mvs(render.depth, render.alpha, current, refs, mask)
        terms["mvs"] = r.value
        d_depth += weights.w_mvs * r.grad
    if weights.w_normal > 0:
        v, gn, gd = loss_normal(render)
        terms["normal"] = v
        d_normal += weights.w_normal * gn
        d_depth += weights.w_normal * gd
    if weights.w_dist > 0:
        v, g = loss_distortion(render)
        terms["dist"] = v
        d_dist += weights.w_dist * g
    for name, v in terms.items():
        total += getattr(weights, "w_" + name) * v
    return LossResult(float(total), terms,
                      dict(d_color=d_color, d_depth=d_depth, d_normal=d_normal, d_distortion=d_dist))
