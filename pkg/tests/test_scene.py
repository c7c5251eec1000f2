import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sparsesplat.errors import NonFiniteError, NonPositiveScaleError, ShapeMismatchError
from sparsesplat.scene import (CameraModel, GaussianPrimitive2D, GaussianScene, ViewBundle,
                               axis_angle_to_quat, quat_multiply, quat_to_rotmat, rotmat_to_quat,
                               sh_to_rgb, tangent_frame, validate_primitive)
from sparsesplat.sh import SH_COEFFS, sh_basis

finite = st.floats(-10, 10, allow_nan=False)
quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 1e-3)


def prim(rotation=(1, 0, 0, 0), scale=(0.1, 0.1), opacity=0.5, sh=None, position=(0, 0, 1)):
    return GaussianPrimitive2D(position, rotation, scale, opacity,
                               np.zeros((SH_COEFFS, 3)) if sh is None else sh)


class TestValidate:
    def test_quaternion_normalised(self):
        p = validate_primitive(prim(rotation=(2, 0, 0, 0)))
        assert np.array_equal(p.rotation, [1, 0, 0, 0])

    def test_zero_scale_rejected(self):
        with pytest.raises(NonPositiveScaleError):
            validate_primitive(prim(scale=(0, 0.1)))

    @pytest.mark.parametrize("field", ["position", "sh"])
    def test_non_finite_rejected(self, field):
        p = prim()
        bad = getattr(p, field).copy()
        bad.flat[0] = np.nan
        with pytest.raises(NonFiniteError):
            validate_primitive(GaussianPrimitive2D(**{**p.__dict__, field: bad}))

    def test_valid_returned_unchanged(self):
        p = prim()
        assert validate_primitive(p) is p

    @given(quats, st.floats(-2, 3))
    def test_invariants_after_validation(self, q, opacity):
        p = validate_primitive(prim(rotation=q, opacity=opacity))
        assert abs(np.linalg.norm(p.rotation) - 1) < 1e-9
        assert 0 <= p.opacity <= 1

    def test_scene_validate_matches_per_primitive(self):
        rng = np.random.default_rng(0)
        s = GaussianScene(rng.normal(size=(6, 3)), rng.normal(size=(6, 4)), rng.uniform(0.1, 1, (6, 2)),
                          rng.uniform(-0.5, 1.5, 6), rng.normal(size=(6, 16, 3)))
        v = s.validate()
        for i in range(6):
            p = validate_primitive(s.primitive(i))
            assert np.allclose(v.rotations[i], p.rotation, atol=1e-15)
            assert v.opacities[i] == p.opacity


class TestSH:
    def test_dc_only(self):
        sh = np.zeros((16, 3))
        sh[0] = [0.3, -0.2, 5.0]
        rgb = sh_to_rgb(sh, [0, 0, 1])
        expected = np.clip(sh[0] * 0.28209479177387814 + 0.5, 0, 1)
        assert np.allclose(rgb, expected, atol=1e-15)

    def test_zero_is_grey(self):
        assert np.array_equal(sh_to_rgb(np.zeros((16, 3)), [1, 0, 0]), [0.5, 0.5, 0.5])

    def test_band_one_z_term(self):
        # Y_1^0 = sqrt(3 / (4 pi)) z, so +z and -z differ by 2 c Y
        y1 = np.sqrt(3 / (4 * np.pi))
        sh = np.zeros((16, 3))
        sh[2] = [0.2, -0.1, 0.3]
        diff = sh_to_rgb(sh, [0, 0, 1]) - sh_to_rgb(sh, [0, 0, -1])
        assert np.allclose(diff, 2 * sh[2] * y1, atol=1e-12)

    def test_basis_orthonormal(self):
        # Monte Carlo over the sphere: integral of Y_i Y_j = delta_ij
        rng = np.random.default_rng(0)
        d = rng.normal(size=(400000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        B = sh_basis(d)
        gram = 4 * np.pi * B.T @ B / len(d)
        assert np.allclose(gram, np.eye(16), atol=0.02)

    @given(arrays(np.float64, (16, 3), elements=finite), arrays(np.float64, 3, elements=finite))
    def test_bounded(self, sh, d):
        if np.linalg.norm(d) < 1e-6:
            d = np.array([0.0, 0.0, 1.0])
        rgb = sh_to_rgb(sh, d / np.linalg.norm(d))
        assert np.all((rgb >= 0) & (rgb <= 1))


class TestTangentFrame:
    def test_identity(self):
        tu, tv, n = tangent_frame(prim(scale=(1, 1)))
        assert np.allclose(tu, [1, 0, 0]) and np.allclose(tv, [0, 1, 0]) and np.allclose(n, [0, 0, 1])

    def test_quarter_turn_about_x(self):
        q = axis_angle_to_quat([1, 0, 0], np.pi / 2)
        _, _, n = tangent_frame(prim(rotation=q, scale=(1, 1)))
        assert np.allclose(n, [0, -1, 0], atol=1e-15)

    def test_scale_does_not_change_normal(self):
        tu, tv, n = tangent_frame(prim(scale=(2, 3)))
        assert np.linalg.norm(tu) == pytest.approx(2)
        assert np.linalg.norm(tv) == pytest.approx(3)
        assert np.allclose(n, [0, 0, 1])

    def test_random_frames_orthonormal(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            p = validate_primitive(prim(rotation=rng.normal(size=4), scale=rng.uniform(0.01, 5, 2)))
            tu, tv, n = tangent_frame(p)
            assert abs(n @ tu) < 1e-9 and abs(n @ tv) < 1e-9
            assert abs(np.linalg.norm(n) - 1) < 1e-9


class TestRotations:
    @given(quats)
    def test_matrix_round_trip(self, q):
        q = q / np.linalg.norm(q)
        R = quat_to_rotmat(q)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.allclose(quat_to_rotmat(rotmat_to_quat(R)), R, atol=1e-12)

    @given(quats, quats)
    def test_product_composes(self, a, b):
        a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
        assert np.allclose(quat_to_rotmat(quat_multiply(a, b)), quat_to_rotmat(a) @ quat_to_rotmat(b),
                           atol=1e-12)


class TestCameraAndView:
    def test_camera_validation(self):
        with pytest.raises(ValueError):
            CameraModel(0.0, (5, 5), (10, 10))
        with pytest.raises(ValueError):
            CameraModel(10.0, (50, 5), (10, 10))
        cam = CameraModel(10.0, (5, 5), (10, 10), rotation=[2, 0, 0, 0])
        assert np.array_equal(cam.rotation, [1, 0, 0, 0])

    def test_world_camera_round_trip(self):
        q = axis_angle_to_quat([1, 2, 3], 0.7)
        cam = CameraModel(30, (8, 8), (16, 16), [0.3, -1, 2], q)
        X = np.random.default_rng(0).normal(size=(10, 3))
        assert np.allclose(cam.camera_to_world(cam.world_to_camera(X)), X, atol=1e-12)

    def test_view_shapes_checked(self):
        cam = CameraModel(10, (4, 3), (8, 6))
        ViewBundle(np.zeros((6, 8, 3)), cam)
        with pytest.raises(ShapeMismatchError):
            ViewBundle(np.zeros((8, 6, 3)), cam)
        with pytest.raises(ShapeMismatchError):
            ViewBundle(np.zeros((6, 8, 3)), cam, mono_depth=np.zeros((5, 8)))
