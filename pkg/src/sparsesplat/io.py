"""File formats: splat scenes, depth maps, images, job configs and metric reports."""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .densify import DensifyConfig
from .errors import CorruptFileError, DecodeError, ResolutionMismatchError, UnsupportedVersionError
from .losses import LossWeights
from .optim import OptimConfig, RegisterConfig
from .scene import CameraModel, GaussianScene, ViewBundle
from .sh import SH_COEFFS

# ---------------------------------------------------------------------------
# scene files: PLY-style header + little-endian float64 records

SCENE_MAGIC = b"ply\n"
SCENE_VERSION = 1
SCENE_FIELDS = (["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "opacity"]
                + [f"sh_{i}" for i in range(SH_COEFFS * 3)])
RECORD = struct.Struct("<" + "d" * len(SCENE_FIELDS))


def _scene_header(n: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"comment sparsesplat-scene version {SCENE_VERSION}",
             f"element vertex {n}"]
    lines += [f"property double {name}" for name in SCENE_FIELDS]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def scene_to_bytes(s: GaussianScene) -> bytes:
    n = len(s)
    rec = np.concatenate([s.positions, s.rotations, s.scales, s.opacities[:, None],
                          s.sh.reshape(n, SH_COEFFS * 3)], axis=1)
    return _scene_header(n) + rec.astype("<f8").tobytes()


def scene_from_bytes(data: bytes) -> GaussianScene:
    if not data.startswith(SCENE_MAGIC):
        raise CorruptFileError("missing ply magic")
    end = data.find(b"end_header\n")
    if end < 0:
        raise CorruptFileError("header is not terminated")
    try:
        header = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise CorruptFileError("header is not ASCII") from exc
    body = data[end + len(b"end_header\n"):]
    version = None
    count = None
    props = []
    fmt = None
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1:]
        elif parts[0] == "comment" and parts[1:3] == ["sparsesplat-scene", "version"]:
            try:
                version = int(parts[3])
            except (IndexError, ValueError) as exc:
                raise CorruptFileError("bad version tag") from exc
        elif parts[0] == "element" and len(parts) == 3 and parts[1] == "vertex":
            try:
                count = int(parts[2])
            except ValueError as exc:
                raise CorruptFileError("bad vertex count") from exc
        elif parts[0] == "property":
            props.append(tuple(parts[1:]))
    if version is None:
        raise CorruptFileError("missing version tag")
    if version != SCENE_VERSION:
        raise UnsupportedVersionError(f"scene file version {version} is not supported")
    if fmt != ["binary_little_endian", "1.0"]:
        raise CorruptFileError(f"unsupported format line {fmt}")
    if count is None or count < 0:
        raise CorruptFileError("missing vertex count")
    if props != [("double", name) for name in SCENE_FIELDS]:
        raise CorruptFileError("unexpected property layout")
    if len(body) != count * RECORD.size:
        raise CorruptFileError(f"expected {count} records ({count * RECORD.size} bytes), got {len(body)} bytes")
    rec = np.frombuffer(body, dtype="<f8").reshape(count, len(SCENE_FIELDS)).astype(np.float64)
    return GaussianScene(rec[:, 0:3], rec[:, 3:7], rec[:, 7:9], rec[:, 9], rec[:, 10:].reshape(count, SH_COEFFS, 3))


def write_scene(path, s: GaussianScene) -> None:
    Path(path).write_bytes(scene_to_bytes(s))


def read_scene(path) -> GaussianScene:
    return scene_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# portable float maps


def write_pfm(path, data: np.ndarray) -> None:
    """Single-channel little-endian PFM, rows stored bottom to top."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        head, rest = data.split(b"\n", 1)
        dims, rest = rest.split(b"\n", 1)
        scale_line, body = rest.split(b"\n", 1)
        channels = {b"Pf": 1, b"PF": 3}[head.strip()]
        w, h = (int(v) for v in dims.split())
        scale = float(scale_line)
    except (ValueError, KeyError) as exc:
        raise DecodeError(f"{path}: not a PFM file") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * channels
    if len(body) < 4 * n:
        raise DecodeError(f"{path}: truncated PFM data")
    arr = np.frombuffer(body[: 4 * n], dtype=dtype).astype(np.float64)
    arr = arr.reshape(h, w, channels)[::-1]
    return arr[..., 0].copy() if channels == 1 else arr.copy()


# ---------------------------------------------------------------------------
# raster images


def read_image(path) -> np.ndarray:
    """RGB image scaled to [0, 1]; 8-bit and 16-bit inputs are accepted."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise DecodeError(f"{path}: cannot decode image ({exc})") from exc
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = arr.astype(np.float64) / 65535.0
        arr = np.repeat(arr[..., None], 3, axis=2)
    elif mode in ("RGB", "RGBA", "L", "P", "LA"):
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB")).astype(np.float64) / 255.0
    else:
        raise DecodeError(f"{path}: unsupported image mode {mode}")
    return arr


def read_mask(path) -> np.ndarray:
    """Boolean mask: any non-zero sample counts as valid."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise DecodeError(f"{path}: cannot decode mask ({exc})") from exc
    if arr.ndim == 3:
        arr = arr[..., :3].max(axis=2)
    return arr > 0


def write_image(path, rgb: np.ndarray) -> None:
    """8-bit RGB PNG with round-to-nearest quantisation."""
    arr = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255, "L").save(path)


# ---------------------------------------------------------------------------
# cameras and views


def camera_to_dict(c: CameraModel) -> dict:
    return {"focal": c.focal, "principal_point": list(c.principal_point), "resolution": list(c.resolution),
            "translation": [float(v) for v in c.translation], "rotation": [float(v) for v in c.rotation]}


def camera_from_dict(d: dict) -> CameraModel:
    try:
        return CameraModel(d["focal"], tuple(d["principal_point"]), tuple(d["resolution"]),
                           np.array(d.get("translation", [0, 0, 0]), dtype=np.float64),
                           np.array(d.get("rotation", [1, 0, 0, 0]), dtype=np.float64))
    except KeyError as exc:
        raise ValueError(f"camera entry lacks {exc}") from exc


@dataclass
class ViewSpec:
    image: str
    camera: dict
    depth: Optional[str] = None
    mono_depth: Optional[str] = None
    mask: Optional[str] = None


def read_view(spec: ViewSpec, base: Path = Path(".")) -> ViewBundle:
    """Load the buffers named by ``spec``; non-positive or non-finite depth is masked out."""
    cam = camera_from_dict(spec.camera)

    def resolve(p):
        return base / p if p is not None else None

    img = read_image(resolve(spec.image))
    h, w = img.shape[:2]
    if (w, h) != cam.resolution:
        raise ResolutionMismatchError(f"{spec.image}: {w}x{h} differs from camera {cam.resolution}")
    mask = np.ones((h, w), dtype=bool)
    if spec.mask is not None:
        mask = read_mask(resolve(spec.mask))
        if mask.shape != (h, w):
            raise ResolutionMismatchError(f"{spec.mask}: mask is {mask.shape[1]}x{mask.shape[0]}")
    bufs = {}
    for name in ("depth", "mono_depth"):
        p = getattr(spec, name)
        if p is None:
            bufs[name] = None
            continue
        d = read_pfm(resolve(p))
        if d.shape != (h, w):
            raise ResolutionMismatchError(f"{p}: depth is {d.shape[1]}x{d.shape[0]}, image is {w}x{h}")
        mask &= np.isfinite(d) & (d > 0)
        bufs[name] = np.where(np.isfinite(d), d, 0.0)
    return ViewBundle(img, cam, bufs["mono_depth"], mask, bufs["depth"])


def read_images(specs: Sequence[ViewSpec], base: Path = Path(".")) -> List[ViewBundle]:
    return [read_view(s, base) for s in specs]


# ---------------------------------------------------------------------------
# job configuration


def _dataclass_from(cls, d: Optional[dict]):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class JobConfig:
    views: List[ViewSpec]
    optim: OptimConfig = field(default_factory=OptimConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    register: RegisterConfig = field(default_factory=RegisterConfig)  # iterations 0 disables
    backproject_stride: int = 4
    seed: int = 0
    heldout: Optional[ViewSpec] = None
    gt_cameras: Optional[List[dict]] = None
    gt_scene: Optional[str] = None
    base_dir: str = "."

    def __post_init__(self):
        if self.densify.k < 1:
            raise ValueError("K must be >= 1")
        if self.backproject_stride < 1:
            raise ValueError("backproject_stride must be >= 1")

    @property
    def base(self) -> Path:
        return Path(self.base_dir)

    def resolve(self, p) -> Path:
        return self.base / p

    def to_dict(self) -> dict:
        d = {"views": [asdict(v) for v in self.views], "optim": asdict(self.optim),
             "weights": asdict(self.weights), "densify": asdict(self.densify),
             "register": {**asdict(self.register), "levels": list(self.register.levels)},
             "backproject_stride": self.backproject_stride, "seed": self.seed}
        if self.heldout is not None:
            d["heldout"] = asdict(self.heldout)
        if self.gt_cameras is not None:
            d["gt_cameras"] = self.gt_cameras
        if self.gt_scene is not None:
            d["gt_scene"] = self.gt_scene
        return d


def job_from_dict(d: dict, base_dir=".") -> JobConfig:
    known = {"views", "optim", "weights", "densify", "register", "backproject_stride", "seed", "heldout",
             "gt_cameras", "gt_scene"}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if not d.get("views"):
        raise ValueError("config lists no views")
    views = [_dataclass_from(ViewSpec, v) for v in d["views"]]
    held = _dataclass_from(ViewSpec, d["heldout"]) if d.get("heldout") else None
    return JobConfig(views, _dataclass_from(OptimConfig, d.get("optim")),
                     _dataclass_from(LossWeights, d.get("weights")),
                     _dataclass_from(DensifyConfig, d.get("densify")),
                     _dataclass_from(RegisterConfig, d.get("register")),
                     int(d.get("backproject_stride", 4)), int(d.get("seed", 0)), held,
                     d.get("gt_cameras"), d.get("gt_scene"), str(base_dir))


def read_job(path) -> JobConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    job = job_from_dict(d, path.parent)
    for spec in job.views + ([job.heldout] if job.heldout else []):
        for p in (spec.image, spec.depth, spec.mono_depth, spec.mask):
            if p is not None and not job.resolve(p).exists():
                raise FileNotFoundError(f"{job.resolve(p)}: referenced file does not exist")
    return job


def write_job(path, job: JobConfig) -> None:
    Path(path).write_text(json.dumps(job.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# metric reports: one JSON object per line with sorted keys


def _clean(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return v
    if isinstance(v, (np.floating,)):
        return _clean(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def format_records(records: Sequence[dict]) -> str:
    return "".join(json.dumps(_clean(r), sort_keys=True) + "\n" for r in records)


def write_records(path, records: Sequence[dict]) -> None:
    Path(path).write_text(format_records(records))


def read_records(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_cameras(path, cams: Sequence[CameraModel]) -> None:
    Path(path).write_text(json.dumps([camera_to_dict(c) for c in cams], indent=2) + "\n")


def read_cameras(path) -> List[CameraModel]:
    return [camera_from_dict(d) for d in json.loads(Path(path).read_text())]
