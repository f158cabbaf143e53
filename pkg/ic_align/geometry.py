"""
SE(3) and 2D affine warp algebra.

Twists are ordered (w1, w2, w3, v1, v2, v3) everywhere in the package,
matching the column order of the rigid warp Jacobian in ic_align.warp.
All types are immutable; every function here is pure.
"""
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateAffineError, NearCutLocusWarning

logger = logging.getLogger(__name__)

SMALL_ANGLE = 1e-8
CUT_LOCUS_EPS = 1e-9
NEAR_PI_BRANCH = 1e-3
AFFINE_DET_FLOOR = 1e-12
ROTATION_TOL = 1e-9


def _frozen_array(values, shape):
    arr = np.array(values, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


def skew(w):
    """3-vector -> 3x3 cross-product matrix"""
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True, eq=False)
class TwistSE3:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", _frozen_array(self.omega, (3,)))
        object.__setattr__(self, "v", _frozen_array(self.v, (3,)))
        if not (np.all(np.isfinite(self.omega)) and np.all(np.isfinite(self.v))):
            raise ValueError("twist components must be finite")

    @classmethod
    def from_vector(cls, xi):
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return cls(xi[:3], xi[3:])

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self):
        return np.concatenate([self.omega, self.v])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen_array(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen_array(self.translation, (3,)))
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("translation must be finite")
        ortho, det = self.orthonormality_error()
        if not (ortho <= ROTATION_TOL and det <= ROTATION_TOL):
            raise ValueError(f"rotation is not in SO(3): |R^T R - I| = {ortho:.3e}, "
                             f"|det R - 1| = {det:.3e}")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        """4x4 homogeneous form"""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Transform an (N, 3) array (or a single 3-vector) of points"""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def is_identity(self):
        return bool(np.array_equal(self.rotation, np.eye(3))
                    and not np.any(self.translation))

    def orthonormality_error(self):
        r = self.rotation
        return float(np.linalg.norm(r.T @ r - np.eye(3))), float(abs(np.linalg.det(r) - 1.0))


@dataclass(frozen=True, eq=False)
class AffineParams:
    """Warp x' = [[1+x1, x3, x5], [x2, 1+x4, x6]] . (x, y, 1)"""
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xi", _frozen_array(self.xi, (6,)))

    @classmethod
    def zero(cls):
        return cls(np.zeros(6))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls([m[0, 0] - 1.0, m[1, 0], m[0, 1], m[1, 1] - 1.0, m[0, 2], m[1, 2]])

    def matrix(self):
        """3x3 homogeneous form"""
        x1, x2, x3, x4, x5, x6 = self.xi
        return np.array([[1.0 + x1, x3, x5],
                         [x2, 1.0 + x4, x6],
                         [0.0, 0.0, 1.0]])

    def determinant(self):
        x1, x2, x3, x4 = self.xi[:4]
        return (1.0 + x1) * (1.0 + x4) - x2 * x3


def _so3_coefficients(theta):
    """(A, B, C) with R = I + A W + B W^2 and V = I + B W + C W^2"""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s = np.sin(theta)
    half = np.sin(0.5 * theta)
    return s / theta, 2.0 * half * half / (theta * theta), (theta - s) / theta ** 3


def exp_se3(xi):
    """Exponential map se(3) -> SE(3) (Rodrigues)."""
    if not isinstance(xi, TwistSE3):
        xi = TwistSE3.from_vector(xi)
    theta = float(np.linalg.norm(xi.omega))
    a, b, c = _so3_coefficients(theta)
    w = skew(xi.omega)
    w2 = w @ w
    rotation = np.eye(3) + a * w + b * w2
    v_mat = np.eye(3) + b * w + c * w2
    return RigidTransform(rotation, v_mat @ xi.v)


def _log_so3(r):
    cos_theta = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    axis_sin = 0.5 * vee(r - r.T)
    theta = float(np.arctan2(np.linalg.norm(axis_sin), cos_theta))

    if theta < SMALL_ANGLE:
        return axis_sin, theta
    if np.pi - theta > NEAR_PI_BRANCH:
        return theta / np.sin(theta) * axis_sin, theta

    # near pi: recover the axis from the symmetric part
    sym = 0.5 * (r + r.T) - cos_theta * np.eye(3)
    col = int(np.argmax(np.diag(sym)))
    axis = sym[:, col] / np.sqrt(max(sym[col, col], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ axis_sin < 0.0:
        axis = -axis
    return theta * axis, theta


def log_se3(transform):
    """Inverse of exp_se3 on the principal branch (rotation angle in [0, pi])."""
    omega, theta = _log_so3(transform.rotation)
    if np.pi - theta < CUT_LOCUS_EPS:
        logger.warning(f"log_se3: rotation angle {theta!r} is at the cut locus")
        warnings.warn("rotation angle within 1e-9 of pi; log map has reduced precision",
                      NearCutLocusWarning, stacklevel=2)
    _, b, c = _so3_coefficients(theta)
    w = skew(omega)
    v_mat = np.eye(3) + b * w + c * (w @ w)
    v = np.linalg.solve(v_mat, transform.translation)
    return TwistSE3(omega, v)


def compose_rigid(a, b):
    """a . b (apply b first)"""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert_rigid(t):
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation))


def affine_compose(xi, dxi):
    """xi o dxi, i.e. M(xi) . M(dxi) written out as six polynomials."""
    a1, a2, a3, a4, a5, a6 = xi.xi
    d1, d2, d3, d4, d5, d6 = dxi.xi
    return AffineParams([
        a1 + d1 + a1 * d1 + a3 * d2,
        a2 + d2 + a2 * d1 + a4 * d2,
        a3 + d3 + a1 * d3 + a3 * d4,
        a4 + d4 + a2 * d3 + a4 * d4,
        a5 + d5 + a1 * d5 + a3 * d6,
        a6 + d6 + a2 * d5 + a4 * d6,
    ])


def affine_inverse(xi):
    x1, x2, x3, x4, x5, x6 = xi.xi
    det = xi.determinant()
    if not np.isfinite(det) or abs(det) < AFFINE_DET_FLOOR:
        raise DegenerateAffineError(f"degenerate affine: determinant {det!r}")
    return AffineParams(np.array([
        -x1 - x1 * x4 + x2 * x3,
        -x2,
        -x3,
        -x4 - x1 * x4 + x2 * x3,
        -x5 - x4 * x5 + x3 * x6,
        -x6 - x1 * x6 + x2 * x5,
    ]) / det)
