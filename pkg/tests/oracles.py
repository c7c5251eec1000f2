"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here shares code with the tiled kernels: every splat is tested
against every pixel, with no bounding boxes, tiles or pair lists.
"""
from dataclasses import dataclass

import numpy as np

from sparsesplat.losses import TERMS, FeatureView, LossWeights, extract_features, sample_pairs
from sparsesplat.raster import render
from sparsesplat.scene import (CameraModel, GaussianScene, ViewBundle, axis_angle_to_quat,
                               quat_multiply, quat_to_rotmat, sh_to_rgb)
from sparsesplat.sh import sh_basis


@dataclass
class BruteRender:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    alpha: np.ndarray
    distortion: np.ndarray
    transmittance: np.ndarray
    weight_sum: np.ndarray  # per splat, per view: sum of blend weights
    pixel_count: np.ndarray  # per splat: pixels where the splat was blended
    margin: float  # smallest relative distance of any quantity to a cut-off
    depth_gap: float  # smallest depth separation of two splats blended on one ray
    order_gap: float  # smallest centre-depth separation, which fixes the blend order
    color_margin: float  # distance of the unclamped colours from the [0, 1] clamp
    margins: dict  # the margin split by cut-off


def brute_render(scene: GaussianScene, cam: CameraModel, near=0.01, sigma_cut=3.0,
                 alpha_min=1 / 255, alpha_max=0.999, t_min=1e-4, background=(0, 0, 0)):
    W, H = cam.resolution
    R = cam.rotmat
    n = len(scene)
    centers = (scene.positions - cam.translation) @ R  # camera frame
    frames = np.einsum("ji,njk->nik", R, quat_to_rotmat(scene.rotations))
    dirs = scene.positions - cam.translation
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    colors = np.array([sh_to_rgb(scene.sh[i], dirs[i]) for i in range(n)])
    raw = np.einsum("nk,nkc->nc", sh_basis(dirs), scene.sh) + 0.5
    color_margin = float(np.min(np.minimum(raw, 1 - raw)))
    z = np.sort(centers[:, 2])
    order_gap = float(np.min(np.diff(z))) if n > 1 else np.inf
    order = sorted(range(n), key=lambda i: (centers[i, 2], i))

    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    normal = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    dist = np.zeros((H, W))
    T_out = np.ones((H, W))
    wsum = np.zeros(n)
    count = np.zeros(n)
    margins = dict(cut=np.inf, alpha=np.inf, trans=np.inf, acc=np.inf)
    gap = np.inf
    for y in range(H):
        for x in range(W):
            ray = np.array([(x - cam.principal_point[0]) / cam.focal,
                            (y - cam.principal_point[1]) / cam.focal, 1.0])
            T = 1.0
            hits = []
            for i in order:
                if centers[i, 2] <= near:
                    continue
                nrm = frames[i][:, 2]
                lam = nrm @ centers[i] / (nrm @ ray)
                if lam <= near:
                    continue
                q = lam * ray - centers[i]
                s1 = q @ frames[i][:, 0] / scene.scales[i, 0]
                s2 = q @ frames[i][:, 1] / scene.scales[i, 1]
                r2 = s1 * s1 + s2 * s2
                margins['cut'] = min(margins['cut'], abs(r2 - sigma_cut ** 2) / sigma_cut ** 2)
                if r2 > sigma_cut ** 2:
                    continue
                a = scene.opacities[i] * np.exp(-0.5 * r2)
                margins['alpha'] = min(margins['alpha'], abs(a - alpha_min) / alpha_min)
                a = min(a, alpha_max)
                if a < alpha_min:
                    continue
                w = a * T
                facing = -nrm if nrm @ centers[i] > 0 else nrm
                hits.append((w, lam, colors[i], facing))
                wsum[i] += w
                count[i] += 1
                T *= 1 - a
                margins['trans'] = min(margins['trans'], abs(T - t_min) / t_min)
                if T < t_min:
                    break
            acc = sum(h[0] for h in hits)
            color[y, x] = sum((h[0] * h[2] for h in hits), np.zeros(3)) + T * np.asarray(background)
            alpha[y, x] = acc
            T_out[y, x] = T
            if acc > 0:
                depth[y, x] = sum(h[0] * h[1] for h in hits) / acc
                normal[y, x] = sum((h[0] * h[3] for h in hits), np.zeros(3)) / acc
            d = 0.0
            for u in range(len(hits)):
                for v in range(len(hits)):
                    d += hits[u][0] * hits[v][0] * abs(hits[u][1] - hits[v][1])
                    if u != v:
                        gap = min(gap, abs(hits[u][1] - hits[v][1]))
            dist[y, x] = d
            margins['acc'] = min(margins['acc'], abs(acc - 0.5) / 0.5)
    return BruteRender(color, depth, normal, alpha, dist, T_out, wsum, count, min(margins.values()), gap,
                       order_gap, color_margin, margins)


def brute_contributions(scene, cams, **kw):
    """Sum over views of the mean blend weight over the pixels each splat touches."""
    total = np.zeros(len(scene))
    for cam in cams:
        r = brute_render(scene, cam, **kw)
        total += np.where(r.pixel_count > 0, r.weight_sum / np.maximum(r.pixel_count, 1), 0.0)
    return total


def brute_chamfer(a, b, block=512):
    """All-pairs Chamfer distance, in row blocks to bound memory."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    to_b = np.empty(len(a))
    to_a = np.full(len(b), np.inf)
    for i in range(0, len(a), block):
        d = np.sqrt(((a[i:i + block, None, :] - b[None, :, :]) ** 2).sum(-1))
        to_b[i:i + block] = d.min(1)
        to_a = np.minimum(to_a, d.min(0))
    return 0.5 * to_b.mean() + 0.5 * to_a.mean()


def brute_ssim(x, y, mask=None, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Per-window SSIM from the textbook formula, averaged over windows inside the image.

    A window counts when the mask holds at its centre.
    """
    H, W = x.shape[:2]
    r = window // 2
    ax = np.arange(window) - r
    g1 = np.exp(-ax ** 2 / (2 * sigma ** 2))
    g = np.outer(g1, g1)
    g /= g.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for yy in range(r, H - r):
        for xx in range(r, W - r):
            if mask is not None and not mask[yy, xx]:
                continue
            for c in range(3):
                a = x[yy - r:yy + r + 1, xx - r:xx + r + 1, c]
                b = y[yy - r:yy + r + 1, xx - r:xx + r + 1, c]
                ma, mb = (g * a).sum(), (g * b).sum()
                va = (g * a * a).sum() - ma * ma
                vb = (g * b * b).sum() - mb * mb
                cov = (g * a * b).sum() - ma * mb
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                            / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def random_scene(rng, n, depth=(1.5, 2.5), spread=0.4, scale=(0.08, 0.2), opacity=(0.3, 0.9),
                 sh_std=0.3):
    pos = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)]
    q = rng.normal(size=(n, 4)) + [3, 0, 0, 0]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sc = rng.uniform(*scale, (n, 2))
    op = rng.uniform(*opacity, n)
    sh = rng.normal(0, sh_std, (n, 16, 3))
    sh[:, 1:] *= 0.3
    return GaussianScene(pos, q, sc, op, sh)


def small_camera(size=32, focal=40.0, jitter=None):
    t = np.zeros(3)
    q = np.array([1.0, 0, 0, 0])
    if jitter is not None:
        t = jitter.normal(0, 0.03, 3)
        q = np.array([1.0, *jitter.normal(0, 0.01, 3)])
        q /= np.linalg.norm(q)
    c = (size - 1) / 2
    return CameraModel(focal, (c, c), (size, size), t, q)


# ---------------------------------------------------------------------------
# gradient-check fixtures


@dataclass
class GradFixture:
    scene: GaussianScene
    camera: CameraModel
    view: ViewBundle
    current: FeatureView
    refs: list
    tries: int


PAIR_SAMPLES = 512


def term_weights(term=None):
    """Weights selecting one loss term (unit weight), or the defaults for ``None``."""
    if term is None:
        return LossWeights(samples=PAIR_SAMPLES)
    return LossWeights(samples=PAIR_SAMPLES, **{f"w_{t}": float(t == term) for t in TERMS})


def reference_cameras(cam):
    offsets = (([0.08, 0.0, 0.0], -0.02), ([-0.06, 0.03, 0.0], 0.015))
    return [cam.with_pose(cam.translation + np.array(d),
                          quat_multiply(cam.rotation, axis_angle_to_quat([0, 1, 0], a)))
            for d, a in offsets]


def reprojection_margin(out, cam, ref_cams):
    """Distance of the nearest warped pixel coordinate from an integer.

    Bilinear sampling has kinks on the pixel grid, so a finite difference
    that moves a warped coordinate across one is not comparable with the
    one-sided analytic derivative.
    """
    ok = (out.alpha > 0.5) & (out.depth > 0.01)
    Xw = cam.camera_to_world(cam.pixel_rays()[ok] * out.depth[ok][:, None])
    m = np.inf
    for rc in ref_cams:
        Xr = (Xw - rc.translation) @ rc.rotmat
        uv = rc.focal * Xr[:, :2] / Xr[:, 2:] + np.array(rc.principal_point)
        m = min(m, float(np.min(np.abs(uv - np.round(uv)))))
    return m


def gradient_fixture(seed, n=6, size=24, max_tries=500) -> GradFixture:
    """A tilted backdrop splat plus ``n`` random splats, away from every kink.

    Every loss here is piecewise smooth; the cut-offs of the blend (3-sigma
    disk, alpha floor, transmittance stop), the 0.5 alpha masks, ties in
    the depth sort, the colour clamp, the hinge thresholds of the ranking
    terms and the bilinear grid of the warp all put kinks in it.  Scenes
    where a 1e-5 parameter step could cross one are redrawn, so central
    differences measure the same branch as the analytic gradient.
    """
    rng = np.random.default_rng(seed)
    for tries in range(1, max_tries + 1):
        fg = random_scene(rng, n, opacity=(0.4, 0.8))
        axis = np.array([0.5, 1.0, 0.0]) + rng.normal(0, 0.1, 3)
        bsh = rng.normal(0, 0.2, (1, 16, 3))
        bsh[:, 1:] *= 0.2
        back = GaussianScene([[0, 0, 3.2]], [axis_angle_to_quat(axis, np.radians(30))], [[3.0, 3.0]],
                             [0.95], bsh)
        scene = GaussianScene.concatenate([back, fg])
        cam = small_camera(size, focal=30.0, jitter=rng)
        out = render(scene, cam)
        target = np.clip(out.color + rng.choice([-1, 1], out.color.shape)
                         * rng.uniform(0.05, 0.2, out.color.shape), 0, 1)
        # quantised mono depth has flat plateaus (smoothness pairs) and a
        # mirrored half whose orderings disagree with the render (ranking pairs)
        mono = np.round(out.depth * 4) / 4
        mono[:, : size // 2] *= -1
        p1, p2 = sample_pairs(out.depth.shape, PAIR_SAMPLES, 0, 8)
        gaps = out.depth.ravel()[p1] - out.depth.ravel()[p2]
        if np.min(np.abs(np.abs(gaps) - 1e-4)) < 5e-4:
            continue
        refs = reference_cameras(cam)
        if reprojection_margin(out, cam, refs) < 1e-4:
            continue
        b = brute_render(scene, cam)
        if (b.margins["cut"] < 3e-4 or b.margins["acc"] < 1e-3 or min(b.margins.values()) < 1e-4
                or b.depth_gap < 2e-4 or b.order_gap < 2e-3 or b.color_margin < 2e-3):
            continue
        view = ViewBundle(target, cam, mono)
        current = FeatureView(extract_features(target), cam)
        ref_views = [FeatureView(extract_features(render(scene, c).color), c) for c in refs]
        return GradFixture(scene, cam, view, current, ref_views, tries)
    raise RuntimeError(f"no kink-free scene within {max_tries} draws")


def fd_errors(fix: GradFixture, terms=TERMS + ("total",), step=1e-5):
    """Max relative error per parameter group for every loss term of ``fix``.

    ``"total"`` is the default-weighted sum of all terms.
    """
    from sparsesplat.grad import backward, compare_gradients, numeric_gradients
    from sparsesplat.losses import total_loss

    out = render(fix.scene, fix.camera)
    weights = {t: term_weights(None if t == "total" else t) for t in terms}

    def value(t):
        return lambda o: total_loss(o, fix.view, weights[t], fix.current, fix.refs, seed=0).total

    numeric = numeric_gradients(fix.scene, fix.camera, {t: value(t) for t in terms}, step)
    report = {}
    for t in terms:
        res = total_loss(out, fix.view, weights[t], fix.current, fix.refs, seed=0)
        analytic = backward(fix.scene, fix.camera, out, **res.grads)
        report[t] = compare_gradients(analytic, numeric[t])
    return report
