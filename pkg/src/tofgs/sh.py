"""Real spherical harmonics up to degree 3 (16 coefficients) and their gradients."""
import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int = 3) -> np.ndarray:
    """Basis values, shape (N, 16); entries above ``degree`` are zero."""
    dirs = np.atleast_2d(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.zeros((dirs.shape[0], 16))
    out[:, 0] = C0
    if degree >= 1:
        out[:, 1] = -C1 * y
        out[:, 2] = C1 * z
        out[:, 3] = -C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = C2[0] * x * y
        out[:, 5] = C2[1] * y * z
        out[:, 6] = C2[2] * (2 * zz - xx - yy)
        out[:, 7] = C2[3] * x * z
        out[:, 8] = C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = C3[0] * y * (3 * xx - yy)
        out[:, 10] = C3[1] * x * y * z
        out[:, 11] = C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = C3[5] * z * (xx - yy)
        out[:, 15] = C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(dirs: np.ndarray, degree: int = 3) -> np.ndarray:
    """Partial derivatives of each basis function w.r.t. (x, y, z), shape (N, 16, 3).

    Components are treated as independent; the caller applies the
    normalization Jacobian of the view direction.
    """
    dirs = np.atleast_2d(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    J = np.zeros((dirs.shape[0], 16, 3))
    if degree >= 1:
        J[:, 1, 1] = -C1
        J[:, 2, 2] = C1
        J[:, 3, 0] = -C1
    if degree >= 2:
        J[:, 4, 0], J[:, 4, 1] = C2[0] * y, C2[0] * x
        J[:, 5, 1], J[:, 5, 2] = C2[1] * z, C2[1] * y
        J[:, 6, 0], J[:, 6, 1], J[:, 6, 2] = -2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z
        J[:, 7, 0], J[:, 7, 2] = C2[3] * z, C2[3] * x
        J[:, 8, 0], J[:, 8, 1] = 2 * C2[4] * x, -2 * C2[4] * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        J[:, 9, 0], J[:, 9, 1] = C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy)
        J[:, 10, 0], J[:, 10, 1], J[:, 10, 2] = C3[1] * y * z, C3[1] * x * z, C3[1] * x * y
        J[:, 11, 0] = C3[2] * (-2 * x * y)
        J[:, 11, 1] = C3[2] * (4 * zz - xx - 3 * yy)
        J[:, 11, 2] = C3[2] * 8 * y * z
        J[:, 12, 0] = C3[3] * (-6 * x * z)
        J[:, 12, 1] = C3[3] * (-6 * y * z)
        J[:, 12, 2] = C3[3] * (6 * zz - 3 * xx - 3 * yy)
        J[:, 13, 0] = C3[4] * (4 * zz - 3 * xx - yy)
        J[:, 13, 1] = C3[4] * (-2 * x * y)
        J[:, 13, 2] = C3[4] * 8 * x * z
        J[:, 14, 0], J[:, 14, 1], J[:, 14, 2] = C3[5] * 2 * x * z, C3[5] * -2 * y * z, C3[5] * (xx - yy)
        J[:, 15, 0], J[:, 15, 1] = C3[6] * (3 * xx - 3 * yy), C3[6] * -6 * x * y
    return J


def dc_for_value(value: float) -> float:
    """DC coefficient that evaluates to ``value`` in every direction."""
    return value / C0
