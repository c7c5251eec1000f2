import json

import numpy as np
import pytest
from PIL import Image

from oracles import random_scene
from sparsesplat.errors import CorruptFileError, DecodeError, ResolutionMismatchError, UnsupportedVersionError
from sparsesplat.io import (JobConfig, ViewSpec, format_records, read_cameras, read_image, read_job,
                            read_pfm, read_records, read_scene, read_view, scene_from_bytes,
                            scene_to_bytes, write_cameras, write_image, write_job, write_pfm,
                            write_records, write_scene)
from sparsesplat.scene import CameraModel, GaussianScene, axis_angle_to_quat


def cam_dict(w=4, h=3):
    return {"focal": 5.0, "principal_point": [w / 2, h / 2], "resolution": [w, h]}


class TestSceneFile:
    def test_round_trip_bit_identical(self, tmp_path):
        s = random_scene(np.random.default_rng(0), 1000)
        write_scene(tmp_path / "s.ply", s)
        back = read_scene(tmp_path / "s.ply")
        for name in ("positions", "rotations", "scales", "opacities", "sh"):
            assert getattr(back, name).tobytes() == getattr(s, name).tobytes()
        assert scene_to_bytes(back) == (tmp_path / "s.ply").read_bytes()

    def test_truncated(self):
        data = scene_to_bytes(random_scene(np.random.default_rng(1), 5))
        with pytest.raises(CorruptFileError):
            scene_from_bytes(data[:-8])

    def test_empty_scene(self):
        data = scene_to_bytes(GaussianScene.empty())
        assert b"element vertex 0\n" in data
        assert len(scene_from_bytes(data)) == 0

    def test_unknown_version(self):
        data = scene_to_bytes(random_scene(np.random.default_rng(2), 2))
        with pytest.raises(UnsupportedVersionError):
            scene_from_bytes(data.replace(b"version 1", b"version 7"))

    def test_not_a_scene(self):
        with pytest.raises(CorruptFileError):
            scene_from_bytes(b"hello world")


class TestRasterFiles:
    def test_pfm_round_trip(self, tmp_path):
        d = np.random.default_rng(0).uniform(-1, 5, (7, 9)).astype(np.float32).astype(np.float64)
        write_pfm(tmp_path / "d.pfm", d)
        assert np.array_equal(read_pfm(tmp_path / "d.pfm"), d)

    def test_pfm_garbage(self, tmp_path):
        (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n255\nabc")
        with pytest.raises(DecodeError):
            read_pfm(tmp_path / "x.pfm")

    def test_eight_bit(self, tmp_path):
        arr = np.zeros((3, 4, 3), np.uint8)
        arr[0, 0] = 255
        Image.fromarray(arr, "RGB").save(tmp_path / "a.png")
        img = read_image(tmp_path / "a.png")
        assert img[0, 0, 0] == 1.0 and img[1, 1, 1] == 0.0

    def test_sixteen_bit(self, tmp_path):
        arr = np.full((3, 4), 65535, np.uint16)
        arr[1, 1] = 0
        Image.fromarray(arr).save(tmp_path / "g.png")
        img = read_image(tmp_path / "g.png")
        assert img.shape == (3, 4, 3)
        assert img[0, 0, 0] == 1.0 and img[1, 1, 2] == 0.0

    def test_write_read_image(self, tmp_path):
        rgb = np.random.default_rng(1).integers(0, 256, (5, 6, 3)) / 255.0
        write_image(tmp_path / "i.png", rgb)
        assert np.array_equal(read_image(tmp_path / "i.png"), rgb)

    def test_undecodable(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not an image")
        with pytest.raises(DecodeError):
            read_image(tmp_path / "bad.png")


class TestViews:
    def write_view(self, tmp_path, depth):
        write_image(tmp_path / "i.png", np.zeros((3, 4, 3)))
        write_pfm(tmp_path / "d.pfm", depth)
        return ViewSpec("i.png", cam_dict(), depth="d.pfm")

    def test_negative_depth_masked(self, tmp_path):
        depth = np.ones((3, 4))
        depth[1, 2] = -1.0
        v = read_view(self.write_view(tmp_path, depth), tmp_path)
        assert not v.valid[1, 2]
        assert v.valid.sum() == 11
        assert v.depth[1, 2] == -1.0

    def test_depth_resolution_mismatch(self, tmp_path):
        with pytest.raises(ResolutionMismatchError):
            read_view(self.write_view(tmp_path, np.ones((4, 4))), tmp_path)

    def test_image_resolution_mismatch(self, tmp_path):
        write_image(tmp_path / "i.png", np.zeros((5, 4, 3)))
        with pytest.raises(ResolutionMismatchError):
            read_view(ViewSpec("i.png", cam_dict()), tmp_path)

    def test_cameras_round_trip(self, tmp_path):
        cams = [CameraModel(30.0, (8, 6), (16, 12), [1.0, 2, 3], axis_angle_to_quat([0, 1, 0], 0.3))]
        write_cameras(tmp_path / "c.json", cams)
        back = read_cameras(tmp_path / "c.json")[0]
        assert np.array_equal(back.translation, cams[0].translation)
        assert np.array_equal(back.rotation, cams[0].rotation)


class TestJob:
    def test_round_trip(self, tmp_path):
        write_image(tmp_path / "i.png", np.zeros((3, 4, 3)))
        job = JobConfig([ViewSpec("i.png", cam_dict())], seed=4)
        write_job(tmp_path / "job.json", job)
        back = read_job(tmp_path / "job.json")
        assert back.to_dict() == job.to_dict()
        assert back.base == tmp_path

    def test_missing_file(self, tmp_path):
        (tmp_path / "job.json").write_text(json.dumps({"views": [{"image": "nope.png", "camera": cam_dict()}]}))
        with pytest.raises(FileNotFoundError, match="nope.png"):
            read_job(tmp_path / "job.json")

    def test_bad_k(self):
        with pytest.raises(ValueError):
            from sparsesplat.densify import DensifyConfig
            JobConfig([], densify=DensifyConfig(k=0))

    def test_unknown_key(self, tmp_path):
        (tmp_path / "job.json").write_text(json.dumps({"views": [], "colour": 1}))
        with pytest.raises(ValueError):
            read_job(tmp_path / "job.json")


class TestRecords:
    def test_sorted_keys_and_inf(self):
        text = format_records([{"b": 1.5, "a": float("inf"), "c": np.float64(2.0)}])
        assert text == '{"a": "inf", "b": 1.5, "c": 2.0}\n'

    def test_round_trip(self, tmp_path):
        recs = [{"kind": "x", "v": 0.1 + 0.2}, {"kind": "y", "n": 3}]
        write_records(tmp_path / "m.jsonl", recs)
        assert read_records(tmp_path / "m.jsonl") == recs
