"""End-to-end stages shared by the CLI, the experiment scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple


from .densify import DensifyConfig, backproject, densify_scene
from .losses import LossWeights
from .metrics import (PointCloud, TrajectoryPair, ate_rmse, chamfer_distance, fuse_depth, psnr,
                      ssim, umeyama_align)
from .optim import OptimConfig, RegisterConfig, optimize, register_views
from .raster import RenderOptions, render
from .scene import CameraModel, GaussianScene, ViewBundle
from .synth import SynthConfig, SynthData, synth_scene

EVAL_VOXEL = 0.01  # fused clouds are voxel-averaged at this size before Chamfer distance


def initialize(views: Sequence[ViewBundle], stride: int = 4,
               densify: DensifyConfig = DensifyConfig(),
               register: Optional[RegisterConfig] = None) -> Tuple[GaussianScene, List[ViewBundle]]:
    """Back-project the depth of every view and self-split the result.

    With ``register`` the poses are first aligned to a single reference view
    and the returned views carry the refined cameras.
    """
    views = list(views)
    if register is not None:
        views = register_views(views, register)
    return densify_scene(backproject(views, stride), densify), views


def reference_cloud(gt_scene: GaussianScene, gt_cameras: Sequence[CameraModel],
                    voxel: float = EVAL_VOXEL) -> PointCloud:
    return fuse_depth(gt_scene, gt_cameras, voxel)


def evaluate(scene: GaussianScene, cams: Sequence[CameraModel], gt_cameras: Sequence[CameraModel],
             gt_cloud: PointCloud, heldout: Optional[ViewBundle] = None, extent: float = 1.0,
             voxel: float = EVAL_VOXEL) -> Dict[str, float]:
    """CD, ATE and held-out image quality of a reconstruction in its own frame.

    The estimated cameras are registered to the ground truth with a
    similarity transform; the same transform carries the fused cloud into
    the ground-truth frame and the held-out camera into the estimate's frame.
    """
    cams = list(cams)
    traj = TrajectoryPair(cams, list(gt_cameras))
    sim = umeyama_align(traj, use_orientation=True)
    rot, trans = ate_rmse(traj, use_orientation=True)
    cloud = fuse_depth(scene, cams, voxel)
    rec = {"cd": chamfer_distance(cloud.transformed(sim.scale, sim.rotation, sim.translation), gt_cloud),
           "ate_rot_deg": rot, "ate_trans": trans, "ate_trans_pct": 100.0 * trans / extent}
    if heldout is not None:
        cam = sim.inverse().apply_camera(heldout.camera)
        img = render(scene, cam, RenderOptions(track_contrib=False)).color
        rec["psnr"] = psnr(img, heldout.image, heldout.valid)
        rec["ssim"] = ssim(img, heldout.image, heldout.valid)
    return rec


@dataclass
class RecoveryConfig:
    """Synthetic pose-and-geometry recovery run."""

    synth: SynthConfig = field(default_factory=lambda: SynthConfig(rot_noise_deg=2.0,
                                                                   trans_noise_frac=0.02))
    optim: OptimConfig = field(default_factory=OptimConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    register: Optional[RegisterConfig] = field(default_factory=RegisterConfig)
    stride: int = 4


@dataclass
class RecoveryResult:
    initial: Dict[str, float]  # depth initialisation at the input poses
    registered: Optional[Dict[str, float]]  # after pose registration, before optimisation
    final: Dict[str, float]
    seconds: float
    losses: List[dict]

    def records(self, include_time: bool = False) -> List[dict]:
        recs = [{"stage": "initial", **self.initial}]
        if self.registered is not None:
            recs.append({"stage": "registered", **self.registered})
        recs.append({"stage": "final", **self.final})
        if include_time:
            recs.append({"stage": "time", "seconds": self.seconds})
        return recs


def run_recovery(cfg: RecoveryConfig = RecoveryConfig(), data: Optional[SynthData] = None,
                 gt_cloud: Optional[PointCloud] = None) -> RecoveryResult:
    """Initialise from perturbed poses, then register and optimise, scoring each stage."""
    data = data or synth_scene(cfg.synth)
    gt_cloud = gt_cloud or reference_cloud(data.scene, data.gt_cameras)

    def score(scene, views):
        return evaluate(scene, [v.camera for v in views], data.gt_cameras, gt_cloud,
                        data.heldout, data.extent)

    scene, _ = initialize(data.views, cfg.stride, cfg.densify)
    initial = score(scene, data.views)
    registered = None
    views = data.views
    start = time.perf_counter()
    if cfg.register is not None:
        scene, views = initialize(data.views, cfg.stride, cfg.densify, cfg.register)
        spent = time.perf_counter() - start
        registered = score(scene, views)
        start = time.perf_counter() - spent  # leave scoring out of the timed method
    out, cams, report = optimize(scene, views, cfg.optim, cfg.weights)
    seconds = time.perf_counter() - start
    final = score(out, [replace(v, camera=c) for v, c in zip(views, cams)])
    return RecoveryResult(initial, registered, final, seconds, report.losses)


ABLATIONS = ("full", "no_rank", "no_smooth", "no_mvs", "no_pose")


def ablate(cfg: RecoveryConfig, name: str) -> RecoveryConfig:
    """``cfg`` with one component switched off."""
    if name == "full":
        return cfg
    if name == "no_pose":
        return replace(cfg, optim=replace(cfg.optim, optimize_poses=False))
    term = {"no_rank": "w_rank", "no_smooth": "w_smooth", "no_mvs": "w_mvs"}.get(name)
    if term is None:
        raise ValueError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    return replace(cfg, weights=replace(cfg.weights, **{term: 0.0}))
