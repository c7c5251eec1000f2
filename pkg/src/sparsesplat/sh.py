"""Real spherical harmonics up to degree 3 and their Cartesian Jacobian.

Coefficient layout is ``(16, 3)``: band-major rows, RGB columns.  Basis
signs and constants follow the usual splatting convention so files are
interchangeable with other splat tools.
"""
import numpy as np

SH_DEGREE = 3
SH_COEFFS = (SH_DEGREE + 1) ** 2

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def sh_basis(dirs):
    """Evaluate the 16 basis functions at unit directions ``(N, 3)``."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty((dirs.shape[0], SH_COEFFS))
    out[:, 0] = C0
    out[:, 1] = -C1 * y
    out[:, 2] = C1 * z
    out[:, 3] = -C1 * x
    out[:, 4] = C2[0] * x * y
    out[:, 5] = C2[1] * y * z
    out[:, 6] = C2[2] * (2 * zz - xx - yy)
    out[:, 7] = C2[3] * x * z
    out[:, 8] = C2[4] * (xx - yy)
    out[:, 9] = C3[0] * y * (3 * xx - yy)
    out[:, 10] = C3[1] * x * y * z
    out[:, 11] = C3[2] * y * (4 * zz - xx - yy)
    out[:, 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[:, 13] = C3[4] * x * (4 * zz - xx - yy)
    out[:, 14] = C3[5] * z * (xx - yy)
    out[:, 15] = C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(dirs):
    """Partial derivatives of each basis polynomial w.r.t. raw ``(x, y, z)``.

    Returns an ``(N, 16, 3)`` array.  The polynomials are differentiated as
    written, without the unit-norm constraint; callers project onto the
    tangent plane of the sphere.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    zero = np.zeros_like(x)
    J = np.zeros((dirs.shape[0], SH_COEFFS, 3))
    J[:, 1, 1] = -C1
    J[:, 2, 2] = C1
    J[:, 3, 0] = -C1
    J[:, 4] = np.stack([C2[0] * y, C2[0] * x, zero], axis=1)
    J[:, 5] = np.stack([zero, C2[1] * z, C2[1] * y], axis=1)
    J[:, 6] = C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=1)
    J[:, 7] = np.stack([C2[3] * z, zero, C2[3] * x], axis=1)
    J[:, 8] = C2[4] * np.stack([2 * x, -2 * y, zero], axis=1)
    J[:, 9] = C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], axis=1)
    J[:, 10] = C3[1] * np.stack([y * z, x * z, x * y], axis=1)
    J[:, 11] = C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], axis=1)
    J[:, 12] = C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], axis=1)
    J[:, 13] = C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], axis=1)
    J[:, 14] = C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], axis=1)
    J[:, 15] = C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], axis=1)
    return J


def eval_sh_colors(sh, dirs):
    """Colors for many splats at once.

    Args:
        sh: ``(N, 16, 3)`` coefficients.
        dirs: ``(N, 3)`` unit viewing directions (camera -> splat).

    Returns:
        ``(colors, raw)`` where ``raw`` is the unclamped ``basis @ sh + 0.5``.
    """
    basis = sh_basis(dirs)
    raw = np.einsum("nk,nkc->nc", basis, sh) + 0.5
    return np.clip(raw, 0.0, 1.0), raw


def rgb_to_dc(rgb):
    """Inverse of the DC-only evaluation: coefficient giving ``rgb``."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0
