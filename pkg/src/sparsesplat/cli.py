"""Command-line pipeline: ``synth -> init -> optimize -> eval`` plus ``render`` and ``prune``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error;
errors are reported on stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import __version__
from . import io
from .densify import prune_by_contribution
from .errors import SplatError
from .metrics import PointCloud
from .optim import optimize
from .pipeline import evaluate, initialize, reference_cloud
from .raster import RenderOptions, render
from .scene import ViewBundle
from .synth import SHAPES, SynthConfig, synth_scene

log = logging.getLogger("sparsesplat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{p}: no such file")
    return p


def _job(args):
    job = io.read_job(_require(args.config))
    if args.seed is not None:
        job = replace(job, seed=args.seed, optim=replace(job.optim, seed=args.seed),
                      densify=replace(job.densify, seed=args.seed))
    return job


def _views(job, cameras: Optional[str]) -> List[ViewBundle]:
    views = io.read_images(job.views, job.base)
    if cameras:
        cams = io.read_cameras(_require(cameras))
        if len(cams) != len(views):
            raise ValueError(f"{cameras}: {len(cams)} cameras for {len(views)} views")
        views = [replace(v, camera=c) for v, c in zip(views, cams)]
    return views


def _scene(path):
    return io.read_scene(_require(path))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    cfg = SynthConfig(shape=args.shape, resolution=args.resolution, n_views=args.views,
                      rot_noise_deg=args.rot_noise, trans_noise_frac=args.trans_noise,
                      depth_noise=args.depth_noise, seed=args.seed or 0)
    data = synth_scene(cfg)
    out = _out(args)

    def save(name, v: ViewBundle) -> io.ViewSpec:
        io.write_image(out / f"{name}.png", v.image)
        io.write_mask(out / f"{name}_mask.png", v.valid)
        io.write_pfm(out / f"{name}_depth.pfm", v.depth)
        io.write_pfm(out / f"{name}_mono.pfm", v.mono_depth)
        return io.ViewSpec(f"{name}.png", io.camera_to_dict(v.camera), f"{name}_depth.pfm",
                           f"{name}_mono.pfm", f"{name}_mask.png")

    specs = [save(f"view_{i}", v) for i, v in enumerate(data.views)]
    held = save("heldout", data.heldout)
    io.write_scene(out / "gt_scene.ply", data.scene)
    job = io.JobConfig(specs, seed=cfg.seed, heldout=held,
                       gt_cameras=[io.camera_to_dict(c) for c in data.gt_cameras],
                       gt_scene="gt_scene.ply")
    io.write_job(out / "job.json", job)
    log.info("wrote %d views of a %s to %s", len(specs), cfg.shape, out)


def cmd_init(args) -> None:
    job = _job(args)
    views = io.read_images(job.views, job.base)
    reg = job.register if not args.no_register and job.register.iterations > 0 else None
    stride = args.stride or job.backproject_stride
    scene, views = initialize(views, stride, job.densify, reg)
    if args.prune_fraction > 0:
        scene = prune_by_contribution(scene, [v.camera for v in views], args.prune_fraction,
                                      job.optim.opacity_floor)
    out = _out(args)
    io.write_scene(out / "init.ply", scene)
    io.write_cameras(out / "init_cameras.json", [v.camera for v in views])
    log.info("initial scene: %d splats", len(scene))


def cmd_optimize(args) -> None:
    job = _job(args)
    scene = _scene(args.scene)
    views = _views(job, args.cameras)
    cfg = job.optim if args.iterations is None else replace(job.optim, iterations=args.iterations)
    scene, cams, report = optimize(scene, views, cfg, job.weights)
    out = _out(args)
    io.write_scene(out / "optimized.ply", scene)
    io.write_cameras(out / "optimized_cameras.json", cams)
    io.write_records(out / "optim_log.jsonl", report.to_records(include_time=not args.deterministic))
    log.info("optimised %d iterations, final loss %.5g", cfg.iterations,
             report.losses[-1]["total"] if report.losses else float("nan"))


def cmd_render(args) -> None:
    job = _job(args)
    scene = _scene(args.scene)
    views = _views(job, args.cameras)
    out = _out(args)
    opts = RenderOptions(track_contrib=False)
    for i, v in enumerate(views):
        r = render(scene, v.camera, opts)
        io.write_image(out / f"render_{i}.png", r.color)
        io.write_pfm(out / f"render_{i}_depth.pfm", r.depth)


def cmd_prune(args) -> None:
    job = _job(args)
    scene = _scene(args.scene)
    views = _views(job, args.cameras)
    pruned = prune_by_contribution(scene, [v.camera for v in views], args.fraction,
                                   job.optim.opacity_floor)
    io.write_scene(_out(args) / "pruned.ply", pruned)
    log.info("pruned %d -> %d splats", len(scene), len(pruned))


def cmd_eval(args) -> None:
    job = _job(args)
    if job.gt_cameras is None or job.gt_scene is None:
        raise ValueError(f"{args.config}: evaluation needs gt_cameras and gt_scene")
    scene = _scene(args.scene)
    views = _views(job, args.cameras)
    gt_scene = _scene(job.resolve(job.gt_scene))
    gt_cams = [io.camera_from_dict(d) for d in job.gt_cameras]
    held = io.read_view(job.heldout, job.base) if job.heldout else None
    gt_cloud: PointCloud = reference_cloud(gt_scene, gt_cams)
    rec = evaluate(scene, [v.camera for v in views], gt_cams, gt_cloud, held, gt_scene.extent())
    rec = {"kind": "metrics", "splats": len(scene), **rec}
    io.write_records(_out(args) / "metrics.jsonl", [rec])
    print(io.format_records([rec]), end="")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="job configuration (JSON)")
    common.add_argument("--seed", type=int, default=None, help="override the job seed")
    common.add_argument("--deterministic", action="store_true",
                        help="keep wall-clock values out of every written report")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="sparsesplat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic fixture and job file")
    s.add_argument("--shape", choices=SHAPES, default="plane")
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--views", type=int, default=3)
    s.add_argument("--rot-noise", type=float, default=0.0, help="pose rotation noise, degrees")
    s.add_argument("--trans-noise", type=float, default=0.0, help="pose shift, fraction of extent")
    s.add_argument("--depth-noise", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("init", parents=[common], help="back-project, densify and prune")
    s.add_argument("--stride", type=int, default=None)
    s.add_argument("--no-register", action="store_true", help="keep the input poses")
    s.add_argument("--prune-fraction", type=float, default=0.05)
    s.set_defaults(func=cmd_init, needs_config=True)

    s = sub.add_parser("optimize", parents=[common], help="refine splats and poses")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", default=None, help="camera list overriding the job poses")
    s.add_argument("--iterations", type=int, default=None)
    s.set_defaults(func=cmd_optimize, needs_config=True)

    s = sub.add_parser("render", parents=[common], help="render colour and depth per view")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", default=None)
    s.set_defaults(func=cmd_render, needs_config=True)

    s = sub.add_parser("prune", parents=[common], help="contribution-based pruning")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", default=None)
    s.add_argument("--fraction", type=float, default=0.05)
    s.set_defaults(func=cmd_prune, needs_config=True)

    s = sub.add_parser("eval", parents=[common], help="CD, ATE and held-out PSNR/SSIM")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", default=None)
    s.set_defaults(func=cmd_eval, needs_config=True)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "needs_config", False) and not args.config:
            raise UsageError(f"sparsesplat {args.command}: --config is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        print(f"usage: {parser.format_usage().strip()[7:]}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (SplatError, OSError, ValueError) as exc:
        msg = str(exc) or type(exc).__name__
        print(f"sparsesplat {args.command}: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
