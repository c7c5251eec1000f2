"""Dense initialisation: back-projection, patch partitioning, splitting and pruning."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import (DegenerateExtentError, EmptyAfterPruneError, EmptySceneError, InvalidDeltaError,
                     NoDepthError, NonFiniteError, NonPositiveScaleError)
from .raster import RenderOptions, accumulate_contributions
from .scene import GaussianScene, ViewBundle, quat_to_rotmat
from .sh import SH_COEFFS, rgb_to_dc

DEFAULT_OPACITY = 0.9
# splat sigma in units of the sample spacing; at 1.0 a near-opaque neighbour
# still has alpha 0.55 one sample away and depth-sorted blending smears texture
FOOTPRINT = 0.5
OPACITY_FLOOR = 0.005


# ---------------------------------------------------------------------------
# back-projection


def mono_depth_scale(mono: np.ndarray, metric: Optional[np.ndarray], mask=None) -> float:
    """Median-ratio factor mapping relative depth onto metric depth.

    Without a metric reference the factor puts the median at 1.
    """
    ok = np.isfinite(mono) & (mono > 0)
    if mask is not None:
        ok &= mask
    if metric is not None:
        ok &= np.isfinite(metric) & (metric > 0)
    if not ok.any():
        raise NoDepthError("no positive depth samples to calibrate against")
    if metric is None:
        return float(1.0 / np.median(mono[ok]))
    return float(np.median(metric[ok] / mono[ok]))


def view_depth(view: ViewBundle, metric_reference: Optional[np.ndarray] = None) -> np.ndarray:
    """Metric depth for a view, falling back to rescaled monocular depth."""
    if view.depth is not None:
        return np.asarray(view.depth, dtype=np.float64)
    if view.mono_depth is None:
        raise NoDepthError("view has neither metric nor monocular depth")
    mono = np.asarray(view.mono_depth, dtype=np.float64)
    return mono * mono_depth_scale(mono, metric_reference, view.valid)


def backproject(views: Sequence[ViewBundle], stride: int = 1, footprint: float = FOOTPRINT) -> GaussianScene:
    """One camera-facing splat per valid pixel (every ``stride``-th pixel).

    Both scales equal ``footprint * stride`` pixel footprints at the
    sample's depth, i.e. ``footprint * depth * stride / focal``.  Opacity
    starts at 0.9 and only the DC band of the colour is set.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not footprint > 0:
        raise ValueError("footprint must be positive")
    parts = []
    for view in views:
        cam = view.camera
        depth = view_depth(view)
        ok = view.valid & np.isfinite(depth) & (depth > 0)
        sel = np.zeros_like(ok)
        sel[::stride, ::stride] = True
        ok &= sel
        if not ok.any():
            continue
        z = depth[ok]
        pts = cam.camera_to_world(cam.pixel_rays()[ok] * z[:, None])
        n = len(z)
        sh = np.zeros((n, SH_COEFFS, 3))
        sh[:, 0, :] = rgb_to_dc(view.image[ok])
        s = footprint * z * stride / cam.focal
        parts.append(GaussianScene(pts, np.tile(cam.rotation, (n, 1)), np.stack([s, s], axis=1),
                                   np.full(n, DEFAULT_OPACITY), sh))
    if not parts:
        return GaussianScene.empty()
    return GaussianScene.concatenate(parts)


# ---------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class NormalizationParams:
    centroid: np.ndarray
    factor: float


def normalize_scene(s: GaussianScene) -> Tuple[GaussianScene, NormalizationParams]:
    """Centre on the centroid and scale so the largest coordinate magnitude is 1."""
    if len(s) == 0:
        raise EmptySceneError("cannot normalise an empty scene")
    c = s.positions.mean(axis=0)
    factor = float(np.abs(s.positions - c).max())
    if not factor > 0:
        raise DegenerateExtentError("all splat centres coincide")
    params = NormalizationParams(c, factor)
    out = s.replace(positions=(s.positions - c) / factor, scales=s.scales / factor,
                    normalization=(c, factor))
    return out, params


def denormalize_scene(s: GaussianScene, params: NormalizationParams) -> GaussianScene:
    return s.replace(positions=s.positions * params.factor + params.centroid,
                     scales=s.scales * params.factor, normalization=None)


# ---------------------------------------------------------------------------
# partitioning


@dataclass
class PatchSet:
    """Disjoint index sets with coordinates local to each patch seed."""

    patches: List[Tuple[np.ndarray, np.ndarray]]
    patch_size: int

    def __len__(self):
        return len(self.patches)

    def indices(self) -> np.ndarray:
        if not self.patches:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([p[0] for p in self.patches])


def knn_partition(s: GaussianScene, patch_size: int, seed: int = 0) -> PatchSet:
    """Greedy KNN patches grown from random uncovered seeds.

    Each patch is the ``patch_size`` nearest *uncovered* points to its
    seed, so patches are disjoint and every index is covered exactly once.
    """
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    n = len(s)
    pts = s.positions
    rng = np.random.default_rng(seed)
    covered = np.zeros(n, dtype=bool)
    tree = cKDTree(pts) if n else None
    patches = []
    remaining = n
    while remaining > 0:
        uncovered = np.flatnonzero(~covered)
        i = int(uncovered[rng.integers(len(uncovered))])
        want = min(patch_size, remaining)
        k = min(n, want)
        while True:
            _, nb = tree.query(pts[i], k=k)
            nb = np.atleast_1d(nb)
            nb = nb[~covered[nb]]
            if len(nb) >= want or k == n:
                break
            k = min(n, 2 * k)
        idx = nb[:want]
        covered[idx] = True
        remaining -= len(idx)
        local = pts[idx] - pts[i]
        r = np.abs(local).max()
        patches.append((idx, local / r if r > 0 else local))
    return PatchSet(patches, patch_size)


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitDelta:
    """Per-parent child offsets; arrays have a leading ``(P, K)`` shape."""

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray

    @classmethod
    def zeros(cls, p: int, k: int) -> "SplitDelta":
        return cls(np.zeros((p, k, 3)), np.zeros((p, k, 4)), np.zeros((p, k, 2)), np.zeros((p, k)),
                   np.zeros((p, k, SH_COEFFS, 3)))


class Densifier:
    """Maps a patch of parents to a :class:`SplitDelta`."""

    def __call__(self, parents: GaussianScene, local: np.ndarray, k: int) -> SplitDelta:
        raise NotImplementedError


def _child_offsets(k: int) -> np.ndarray:
    if k == 1:
        return np.zeros(1)
    return np.linspace(-0.5, 0.5, k)


class AnalyticDensifier(Densifier):
    """Spread children along the first tangent axis and halve their scale.

    For ``K = 2`` the children sit at ``+-0.5 * s_u`` along ``t_u``.
    """

    def __call__(self, parents, local, k):
        d = SplitDelta.zeros(len(parents), k)
        t_u = quat_to_rotmat(parents.rotations)[:, :, 0]
        off = _child_offsets(k)
        d.position[:] = off[None, :, None] * (parents.scales[:, 0:1] * t_u)[:, None, :]
        d.scale[:] = -0.5 * parents.scales[:, None, :]
        return d


class ZeroDensifier(Densifier):
    """Children are exact copies of their parent."""

    def __call__(self, parents, local, k):
        return SplitDelta.zeros(len(parents), k)


def apply_split(parents: GaussianScene, delta: SplitDelta) -> GaussianScene:
    """Children ``parent + delta``, validated, in ``(parent, child)`` order."""
    p, k = delta.opacity.shape
    if p != len(parents):
        raise InvalidDeltaError("delta does not match the parent count")

    def rep(a):
        return np.repeat(a, k, axis=0)

    pos = rep(parents.positions) + delta.position.reshape(p * k, 3)
    rot = rep(parents.rotations) + delta.rotation.reshape(p * k, 4)
    scl = rep(parents.scales) + delta.scale.reshape(p * k, 2)
    opa = rep(parents.opacities) + delta.opacity.reshape(p * k)
    sh = rep(parents.sh) + delta.sh.reshape(p * k, SH_COEFFS, 3)
    try:
        return GaussianScene(pos, rot, scl, opa, sh, parents.normalization).validate()
    except (NonFiniteError, NonPositiveScaleError) as exc:
        raise InvalidDeltaError(f"child failed validation: {exc}") from exc


def self_split(parents: GaussianScene, densifier: Densifier, k: int,
               local: Optional[np.ndarray] = None) -> GaussianScene:
    if k < 1:
        raise ValueError("K must be >= 1")
    if local is None:
        local = np.zeros((len(parents), 3))
    return apply_split(parents, densifier(parents, local, k))


# ---------------------------------------------------------------------------
# optional learned densifier


def _patch_context(parents: GaussianScene, local: np.ndarray) -> np.ndarray:
    """Per-parent input vector: local coordinates, patch spread and attributes."""
    spread = np.broadcast_to(local.std(axis=0), local.shape)
    n = quat_to_rotmat(parents.rotations)[:, :, 2]
    return np.concatenate([local, spread, np.log(parents.scales), parents.opacities[:, None],
                           parents.sh[:, 0, :], n], axis=1)


CONTEXT_DIM = 15


class LearnedDensifier(Densifier):
    """Analytic split plus a small MLP residual on child position and log-scale.

    Two hidden tanh layers of width 64.  The output layer starts at zero so
    an untrained model reproduces :class:`AnalyticDensifier` exactly.
    """

    def __init__(self, k: int = 2, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.k = k
        self.base = AnalyticDensifier()
        out = k * 5
        self.params = {
            "W1": rng.normal(0, 1 / np.sqrt(CONTEXT_DIM), (CONTEXT_DIM, hidden)), "b1": np.zeros(hidden),
            "W2": rng.normal(0, 1 / np.sqrt(hidden), (hidden, hidden)), "b2": np.zeros(hidden),
            "W3": np.zeros((hidden, out)), "b3": np.zeros(out),
        }

    def forward(self, x):
        p = self.params
        h1 = np.tanh(x @ p["W1"] + p["b1"])
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        return h2 @ p["W3"] + p["b3"], (x, h1, h2)

    def backward(self, cache, g_out) -> dict:
        x, h1, h2 = cache
        p = self.params
        grads = {"W3": h2.T @ g_out, "b3": g_out.sum(0)}
        g2 = (g_out @ p["W3"].T) * (1 - h2 ** 2)
        grads["W2"] = h1.T @ g2
        grads["b2"] = g2.sum(0)
        g1 = (g2 @ p["W2"].T) * (1 - h1 ** 2)
        grads["W1"] = x.T @ g1
        grads["b1"] = g1.sum(0)
        return grads

    def _residual(self, parents, local, k):
        if k != self.k:
            raise ValueError(f"model was built for K={self.k}")
        x = _patch_context(parents, local)
        y, cache = self.forward(x)
        return y.reshape(len(parents), k, 5), cache

    def __call__(self, parents, local, k):
        d = self.base(parents, local, k)
        r, _ = self._residual(parents, local, k)
        self._apply_residual(d, parents, r)
        return d

    @staticmethod
    def _apply_residual(d: SplitDelta, parents, r):
        s = parents.scales[:, None, :]
        d.position += 0.1 * r[:, :, 0:3] * parents.scales[:, None, 0:1]
        d.scale[:] = (s + d.scale) * np.exp(0.5 * np.tanh(r[:, :, 3:5])) - s

    def fit(self, parents: GaussianScene, views: Sequence[ViewBundle], iterations: int = 50,
            lr: float = 1e-3, opts: RenderOptions = RenderOptions(track_contrib=False)) -> list:
        """Per-scene training of the residual head through the renderer.

        Minimises the L1 photometric error of ``parents + children`` over
        ``views``.  Returns the loss history.
        """
        from .grad import backward
        from .losses import loss_l1
        from .raster import render

        local = np.zeros((len(parents), 3))
        m = {k: np.zeros_like(v) for k, v in self.params.items()}
        v2 = {k: np.zeros_like(v) for k, v in self.params.items()}
        b1, b2, eps = 0.9, 0.999, 1e-8
        hist = []
        k = self.k
        P = len(parents)
        for it in range(1, iterations + 1):
            base = self.base(parents, local, k)
            r, cache = self._residual(parents, local, k)
            d = SplitDelta(base.position.copy(), base.rotation, base.scale.copy(), base.opacity, base.sh)
            self._apply_residual(d, parents, r)
            children = apply_split(parents, d)
            scene = GaussianScene.concatenate([parents, children])
            total = 0.0
            g_pos = np.zeros((P * k, 3))
            g_scl = np.zeros((P * k, 2))
            for view in views:
                out = render(scene, view.camera, opts)
                val, gc = loss_l1(out.color, view.image, view.valid)
                total += val
                gb = backward(scene, view.camera, out, d_color=gc)
                g_pos += gb.position[P:]
                g_scl += gb.scale[P:]
            hist.append(total / len(views))
            g_pos = g_pos.reshape(P, k, 3)
            g_scl = g_scl.reshape(P, k, 2)
            g_r = np.zeros_like(r)
            g_r[:, :, 0:3] = 0.1 * g_pos * parents.scales[:, None, 0:1]
            child_s = d.scale + parents.scales[:, None, :]
            th = np.tanh(r[:, :, 3:5])
            g_r[:, :, 3:5] = g_scl * child_s * 0.5 * (1 - th ** 2)
            grads = self.backward(cache, g_r.reshape(P, k * 5))
            for name, g in grads.items():
                m[name] = b1 * m[name] + (1 - b1) * g
                v2[name] = b2 * v2[name] + (1 - b2) * g * g
                mh = m[name] / (1 - b1 ** it)
                vh = v2[name] / (1 - b2 ** it)
                self.params[name] -= lr * mh / (np.sqrt(vh) + eps)
        return hist


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class DensifyConfig:
    patch_size: int = 2048
    k: int = 2
    seed: int = 0
    densifier: str = "analytic"  # "analytic" | "zero" | "learned"


def make_densifier(name: str, k: int = 2, seed: int = 0) -> Densifier:
    if name == "analytic":
        return AnalyticDensifier()
    if name == "zero":
        return ZeroDensifier()
    if name == "learned":
        return LearnedDensifier(k=k, seed=seed)
    raise ValueError(f"unknown densifier {name!r}")


def densify_scene(s: GaussianScene, cfg: DensifyConfig = DensifyConfig(),
                  densifier: Optional[Densifier] = None) -> GaussianScene:
    """Normalise, split each patch, merge with the parents and undo the normalisation.

    The output holds the ``P`` parents followed by ``P * K`` children, the
    children ordered by parent index.
    """
    s = s.validate()
    dens = densifier or make_densifier(cfg.densifier, cfg.k, cfg.seed)
    ns, params = normalize_scene(s)
    patches = knn_partition(ns, cfg.patch_size, cfg.seed)
    n = len(s)
    delta = SplitDelta.zeros(n, cfg.k)
    for idx, local in patches.patches:
        d = dens(ns.subset(idx), local, cfg.k)
        for name in ("position", "rotation", "scale", "opacity", "sh"):
            getattr(delta, name)[idx] = getattr(d, name)
    children = apply_split(ns, delta)
    merged = GaussianScene.concatenate([ns, children])
    return denormalize_scene(merged, params)


# ---------------------------------------------------------------------------
# pruning


def prune_indices(contrib: np.ndarray, opacities: np.ndarray, fraction: float,
                  opacity_floor: float = OPACITY_FLOOR) -> np.ndarray:
    """Indices to remove: the lowest ``floor(fraction * P)`` by ``(C, index)``
    plus every splat below the opacity floor."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    n = len(contrib)
    k = int(np.floor(fraction * n))
    order = np.lexsort((np.arange(n), contrib))
    drop = np.zeros(n, dtype=bool)
    drop[order[:k]] = True
    drop |= opacities < opacity_floor
    return np.flatnonzero(drop)


def prune_by_contribution(s: GaussianScene, cams, fraction: float = 0.05,
                          opacity_floor: float = OPACITY_FLOOR,
                          opts: RenderOptions = RenderOptions(),
                          contrib: Optional[np.ndarray] = None) -> GaussianScene:
    """Drop low-contribution and near-transparent splats, keeping survivor order."""
    if len(s) == 0:
        raise EmptySceneError("cannot prune an empty scene")
    if contrib is None:
        contrib = accumulate_contributions(s, cams, opts)
    drop = prune_indices(contrib, s.opacities, fraction, opacity_floor)
    if len(drop) == len(s):
        raise EmptyAfterPruneError("pruning would remove every splat")
    keep = np.setdiff1d(np.arange(len(s)), drop)
    return s.subset(keep)
