"""Per-scene optimisation of splats and camera poses with Adam."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .densify import OPACITY_FLOOR, prune_indices
from .errors import DivergedLossError, EmptyAfterPruneError, ShapeMismatchError
from .grad import backward
from .losses import FeatureView, LossWeights, extract_features, total_loss
from .raster import RenderOptions, render, view_contributions
from .scene import CameraModel, GaussianScene, ViewBundle
from .sh import SH_COEFFS

LOGIT_EPS = 1e-6


@dataclass
class OptimConfig:
    """Optimisation schedule and per-group learning rates.

    ``lr_position`` and ``lr_pose_translation`` are multiplied by the scene
    extent at the start of :func:`optimize`.
    """

    iterations: int = 1000
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_pose_translation: float = 1e-4
    lr_pose_rotation: float = 1e-4
    prune_interval: int = 500
    prune_fraction: float = 0.05
    opacity_floor: float = OPACITY_FLOOR
    downsample_initial: int = 2
    downsample_switch_iter: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lr_decay_final: float = 0.01  # position and pose rates decay exponentially to this fraction
    optimize_poses: bool = True
    mask_uncovered: bool = False  # restrict losses to pixels the scene already covers
    fix_first_pose: bool = False
    sh_rest_delay: float = 0.0  # fraction of the run during which bands >= 1 stay frozen
    max_bad_steps: int = 3

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        for k, v in asdict(self).items():
            if k.startswith("lr_") and v < 0:
                raise ValueError(f"{k} must be non-negative")
        if not 0 <= self.prune_fraction < 1:
            raise ValueError("prune_fraction must lie in [0, 1)")
        if self.downsample_initial < 1 or self.prune_interval < 1:
            raise ValueError("downsample factor and prune interval must be >= 1")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: Dict[str, int] = field(default_factory=dict)

    def subset(self, keys: Sequence[str], idx: np.ndarray) -> "AdamState":
        """Keep rows ``idx`` of the per-splat moments named in ``keys``."""
        out = AdamState(dict(self.m), dict(self.v), dict(self.t))
        for k in keys:
            if k in out.m:
                out.m[k] = out.m[k][idx]
                out.v[k] = out.v[k][idx]
        return out


def adam_step(params: dict, grads: dict, state: AdamState, rates: dict, beta1=0.9, beta2=0.999,
              eps=1e-8, quaternion_keys=()) -> Tuple[dict, AdamState]:
    """One bias-corrected Adam update per parameter group.

    Groups missing from ``grads`` or with rate 0 are left untouched.  Rows
    of the groups in ``quaternion_keys`` are renormalised afterwards.
    Callers pass log-scales, so scale updates happen in log space.
    """
    new = dict(params)
    for k, g in grads.items():
        lr = rates.get(k, 0.0)
        if lr == 0:
            continue
        p = params[k]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        t = state.t.get(k, 0) + 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        q = p - lr * mh / (np.sqrt(vh) + eps)
        if k in quaternion_keys:
            q = q / np.linalg.norm(q, axis=-1, keepdims=True)
        new[k] = q
        state.m[k], state.v[k], state.t[k] = m, v, t
    return new, state


# ---------------------------------------------------------------------------
# parameterisation


def _logit(x):
    x = np.clip(x, LOGIT_EPS, 1 - LOGIT_EPS)
    return np.log(x) - np.log1p(-x)


def _sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


def scene_to_params(s: GaussianScene) -> dict:
    return {"position": s.positions.copy(), "rotation": s.rotations.copy(),
            "log_scale": np.log(s.scales), "logit_opacity": _logit(s.opacities), "sh": s.sh.copy()}


def params_to_scene(p: dict) -> GaussianScene:
    return GaussianScene(p["position"], p["rotation"], np.exp(p["log_scale"]),
                         _sigmoid(p["logit_opacity"]), p["sh"])


SPLAT_KEYS = ("position", "rotation", "log_scale", "logit_opacity", "sh")
QUAT_KEYS = ("rotation", "cam_rotation")
DECAYED = ("position", "cam_translation", "cam_rotation")


# ---------------------------------------------------------------------------
# report


@dataclass
class OptimReport:
    losses: List[dict] = field(default_factory=list)
    prune_counts: List[Tuple[int, int, int]] = field(default_factory=list)  # (iter, before, after)
    pose_deltas: List[dict] = field(default_factory=list)
    wall_time: float = 0.0
    diverged: bool = False

    def to_records(self, include_time: bool = False) -> List[dict]:
        """Line records with stable keys; wall time only on request."""
        recs = [{"kind": "loss", **r} for r in self.losses]
        recs += [{"kind": "prune", "iter": i, "before": b, "after": a} for i, b, a in self.prune_counts]
        recs += [{"kind": "pose", **d} for d in self.pose_deltas]
        if include_time:
            recs.append({"kind": "time", "seconds": self.wall_time})
        return recs


# ---------------------------------------------------------------------------
# loop


def _level_views(views, factor):
    return [v.downsampled(factor) for v in views]


def _features(views):
    return [extract_features(v.image) for v in views]


def optimize(scene: GaussianScene, views: Sequence[ViewBundle], cfg: OptimConfig = OptimConfig(),
             weights: LossWeights = LossWeights(),
             opts: RenderOptions = RenderOptions()) -> Tuple[GaussianScene, List[CameraModel], OptimReport]:
    """Jointly refine ``scene`` and the view cameras.

    Every iteration renders all views, sums the weighted losses and takes
    one Adam step.  Contribution pruning runs at iteration 0 and every
    ``prune_interval`` iterations.  Views are box-downsampled by
    ``downsample_initial`` until ``downsample_switch_iter``.
    """
    views = list(views)
    if len(views) < 2:
        raise ValueError("optimisation needs at least two views")
    t0 = time.perf_counter()
    scene = scene.validate()
    extent = max(scene.extent(), 1e-12)
    rates = {"position": cfg.lr_position * extent, "rotation": cfg.lr_rotation, "log_scale": cfg.lr_scale,
             "logit_opacity": cfg.lr_opacity, "sh": cfg.lr_sh,
             "cam_translation": cfg.lr_pose_translation * extent, "cam_rotation": cfg.lr_pose_rotation}
    params = scene_to_params(scene)
    cams = [v.camera for v in views]
    cam_t = np.array([c.translation for c in cams])
    cam_q = np.array([c.rotation for c in cams])
    cam_t0, cam_q0 = cam_t.copy(), cam_q.copy()
    pose_mask = np.ones(len(views))
    if cfg.fix_first_pose:
        pose_mask[0] = 0.0
    state = AdamState()
    report = OptimReport()
    rng = np.random.default_rng(cfg.seed)
    contrib_opts = RenderOptions(**{**opts.__dict__, "track_contrib": True})

    level = None
    lv = feats = None
    bad = 0
    n_iter = cfg.iterations
    it = 0
    while True:
        factor = cfg.downsample_initial if it < cfg.downsample_switch_iter else 1
        if factor != level:
            level = factor
            lv = _level_views(views, factor)
            feats = _features(lv)
        cur = params_to_scene(params)
        level_cams = [c.with_pose(cam_t[i], cam_q[i]).downsampled(factor) if factor > 1
                      else c.with_pose(cam_t[i], cam_q[i]) for i, c in enumerate(cams)]

        if it % cfg.prune_interval == 0 and (it < n_iter or it == 0):
            contrib = np.zeros(len(cur))
            for cam in level_cams:
                contrib += view_contributions(render(cur, cam, contrib_opts))
            drop = prune_indices(contrib, cur.opacities, cfg.prune_fraction, cfg.opacity_floor)
            if len(drop) == len(cur):
                raise EmptyAfterPruneError("pruning would remove every splat")
            before = len(cur)
            if len(drop):
                keep = np.setdiff1d(np.arange(before), drop)
                params = {k: v[keep] for k, v in params.items()}
                state = state.subset(SPLAT_KEYS, keep)
                cur = params_to_scene(params)
            report.prune_counts.append((it, before, len(cur)))
        if it >= n_iter:
            break

        n = len(cur)
        g = {"position": np.zeros((n, 3)), "rotation": np.zeros((n, 4)), "log_scale": np.zeros((n, 2)),
             "logit_opacity": np.zeros(n), "sh": np.zeros((n, SH_COEFFS, 3)),
             "cam_translation": np.zeros_like(cam_t), "cam_rotation": np.zeros_like(cam_q)}
        terms_sum: dict = {}
        total = 0.0
        seed = int(rng.integers(2 ** 31))
        for i, (view, cam) in enumerate(zip(lv, level_cams)):
            out = render(cur, cam, opts)
            cur_fv = FeatureView(feats[i], cam)
            refs = [FeatureView(feats[j], level_cams[j]) for j in range(len(lv)) if j != i]
            if cfg.mask_uncovered:
                view = ViewBundle(view.image, view.camera, view.mono_depth,
                                  view.valid & (out.alpha > 0.5), view.depth)
            res = total_loss(out, view, weights, cur_fv, refs, seed=seed + i)
            total += res.total
            for k, v in res.terms.items():
                terms_sum[k] = terms_sum.get(k, 0.0) + v
            gb = backward(cur, cam, out, **res.grads)
            g["position"] += gb.position
            g["rotation"] += gb.rotation
            g["log_scale"] += gb.scale * cur.scales
            g["logit_opacity"] += gb.opacity * cur.opacities * (1 - cur.opacities)
            g["sh"] += gb.sh
            g["cam_translation"][i] = gb.cam_translation * pose_mask[i]
            g["cam_rotation"][i] = gb.cam_rotation * pose_mask[i]

        if not np.isfinite(total):
            bad += 1
            report.losses.append({"iter": it, "total": None, "n": n})
            if bad >= cfg.max_bad_steps:
                report.diverged = True
                raise DivergedLossError(f"loss non-finite for {bad} consecutive iterations")
            it += 1
            continue
        bad = 0
        report.losses.append({"iter": it, "total": total, "n": n,
                              **{k: terms_sum[k] for k in sorted(terms_sum)}})

        if cfg.sh_rest_delay > 0 and it < cfg.sh_rest_delay * n_iter:
            g["sh"][:, 1:, :] = 0.0
        if not cfg.optimize_poses:
            del g["cam_translation"], g["cam_rotation"]
        full = dict(params, cam_translation=cam_t, cam_rotation=cam_q)
        decay = cfg.lr_decay_final ** (it / max(1, n_iter - 1))
        step_rates = {k: v * decay if k in DECAYED else v for k, v in rates.items()}
        full, state = adam_step(full, g, state, step_rates, cfg.beta1, cfg.beta2, cfg.eps, QUAT_KEYS)
        params = {k: full[k] for k in SPLAT_KEYS}
        cam_t, cam_q = full["cam_translation"], full["cam_rotation"]
        it += 1

    final = params_to_scene(params)
    out_cams = [c.with_pose(cam_t[i], cam_q[i]) for i, c in enumerate(cams)]
    for i in range(len(cams)):
        # relative rotation q0^-1 q; its angle from atan2 stays exact near zero
        # chord form of the geodesic angle: exact zero for unchanged poses
        q0, q = cam_q0[i], cam_q[i] * (1.0 if cam_q0[i] @ cam_q[i] >= 0 else -1.0)
        angle = 4 * np.arctan2(np.linalg.norm(q - q0), np.linalg.norm(q + q0))
        report.pose_deltas.append({
            "view": i, "translation": float(np.linalg.norm(cam_t[i] - cam_t0[i])),
            "rotation_deg": float(np.degrees(angle))})
    report.wall_time = time.perf_counter() - t0
    return final, out_cams, report


@dataclass
class RegisterConfig:
    """Pose-only alignment of every view to the back-projection of a reference view."""

    reference: int = 0
    stride: int = 1
    # Disks about one pixel wide reproduce the reference image most faithfully
    # from nearby viewpoints; wider ones blur, narrower ones leave holes.
    footprint: float = 0.35
    levels: Tuple[int, ...] = (4, 2, 1)  # downsampling factors, coarse to fine
    iterations: int = 15  # Levenberg-Marquardt steps per level
    damping: float = 1e-3
    step_rotation: float = 1e-3  # finite-difference steps for the 6-DoF Jacobian
    step_translation: float = 1e-3  # times the reference median depth

    def __post_init__(self):
        self.levels = tuple(int(f) for f in self.levels)
        if any(f < 1 for f in self.levels) or self.iterations < 0 or self.stride < 1:
            raise ValueError("levels and stride must be >= 1, iterations >= 0")


def _pose_increment(cam: CameraModel, delta) -> CameraModel:
    """Apply a camera-frame twist ``(rx, ry, rz, tx, ty, tz)`` to ``cam``."""
    from .scene import axis_angle_to_quat, quat_multiply

    w = np.asarray(delta[:3], dtype=np.float64)
    ang = np.linalg.norm(w)
    dq = np.array([1.0, 0, 0, 0]) if ang == 0 else axis_angle_to_quat(w / ang, ang)
    t = cam.translation + cam.rotmat @ np.asarray(delta[3:], dtype=np.float64)
    return cam.with_pose(t, quat_multiply(cam.rotation, dq))


def _photometric_residual(scene, cam, target, mask, opts):
    """Residual of the alpha-normalised colour, insensitive to coverage holes."""
    out = render(scene, cam, opts)
    bg = np.asarray(opts.background, dtype=np.float64)
    a = np.maximum(out.alpha, 1e-6)[..., None]
    mean_color = (out.color - out.transmittance[..., None] * bg) / a
    return (mean_color - target)[mask].ravel(), out


def align_camera(scene: GaussianScene, view: ViewBundle, cfg: RegisterConfig = RegisterConfig(),
                 depth_scale: float = 1.0, opts: RenderOptions = RenderOptions(track_contrib=False)) -> CameraModel:
    """Levenberg-Marquardt photometric alignment of one camera to a fixed scene.

    The 6x6 normal equations use a central-difference Jacobian of the
    rendered image, which handles the near-degenerate rotation/translation
    valley of planar scenes far better than a first-order optimiser.  Only
    pixels the scene covers at the current estimate are compared.
    """
    cam = view.camera
    hs = np.array([cfg.step_rotation] * 3 + [cfg.step_translation * depth_scale] * 3)
    for factor in cfg.levels:
        lv = view.downsampled(factor)
        target = lv.image
        for _ in range(cfg.iterations):
            out = render(scene, cam.downsampled(factor), opts)
            mask = lv.valid & (out.alpha > 0.5)
            if mask.sum() < 6:
                break
            r, _ = _photometric_residual(scene, cam.downsampled(factor), target, mask, opts)
            J = np.empty((r.size, 6))
            for k in range(6):
                e = np.zeros(6)
                e[k] = hs[k]
                rp, _ = _photometric_residual(scene, _pose_increment(cam, e).downsampled(factor), target, mask, opts)
                rm, _ = _photometric_residual(scene, _pose_increment(cam, -e).downsampled(factor), target, mask, opts)
                J[:, k] = (rp - rm) / (2 * hs[k])
            A = J.T @ J
            b = J.T @ r
            cost = r @ r
            mu = cfg.damping
            improved = False
            for _try in range(8):
                delta = -np.linalg.solve(A + mu * np.diag(np.diag(A) + 1e-12), b)
                cand = _pose_increment(cam, delta)
                rn, _ = _photometric_residual(scene, cand.downsampled(factor), target, mask, opts)
                if rn @ rn < cost:
                    cam = cand
                    improved = True
                    break
                mu *= 10
            if not improved or np.all(np.abs(delta) < 1e-3 * hs):
                break
    return cam


def register_views(views: Sequence[ViewBundle], cfg: RegisterConfig = RegisterConfig(),
                   opts: RenderOptions = RenderOptions(track_contrib=False)) -> List[ViewBundle]:
    """Refine the poses of all views against a single-view reconstruction.

    The reference view's depth is back-projected into a splat scene that is
    internally consistent, so pose-only alignment of the other views against
    it cannot be absorbed by moving splats.  The reference pose stays fixed
    and fixes the gauge.
    """
    from .densify import backproject, view_depth

    views = list(views)
    if not cfg.levels or cfg.iterations == 0 or len(views) < 2:
        return views
    ref = views[cfg.reference]
    scene = backproject([ref], cfg.stride, cfg.footprint)
    if len(scene) == 0:
        return views
    dref = view_depth(ref)
    depth_scale = float(np.median(dref[ref.valid & (dref > 0)]))
    out = list(views)
    for i, v in enumerate(views):
        if i == cfg.reference:
            continue
        cam = align_camera(scene, v, cfg, depth_scale, opts)
        out[i] = ViewBundle(v.image, cam, v.mono_depth, v.mask, v.depth)
    return out
