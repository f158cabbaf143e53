"""
Rigid (depth reprojection) and affine warps, z-buffer occlusion,
analytic warp Jacobians and steepest-descent images.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .imaging import bilinear_sample_many

logger = logging.getLogger(__name__)

MIN_WARPED_DEPTH = 1e-6
DEFAULT_OCCLUSION_SLACK = 0.05  # metres

RIGID = "rigid"
AFFINE = "affine"
FAMILIES = (AFFINE, RIGID)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def downscaled(self, times=1):
        """Intrinsics of the level `times` halvings coarser (pixel-centre preserving)"""
        k = self
        for _ in range(times):
            k = CameraIntrinsics(k.fx / 2.0, k.fy / 2.0,
                                 (k.cx + 0.5) / 2.0 - 0.5, (k.cy + 0.5) / 2.0 - 0.5)
        return k

    def normalize(self, x, y):
        return (np.asarray(x, dtype=np.float64) - self.cx) / self.fx, \
               (np.asarray(y, dtype=np.float64) - self.cy) / self.fy

    def backproject(self, x, y, inverse_depth):
        """Pixels + inverse depth -> (N, 3) camera-frame points"""
        pu, pv = self.normalize(x, y)
        z = 1.0 / np.asarray(inverse_depth, dtype=np.float64)
        return np.stack([pu * z, pv * z, z], axis=-1)


@dataclass(frozen=True, eq=False)
class SteepestDescentImage:
    """Rows J(u) = grad T(u) . dW/dxi for the pixels in `index` (flat, row-major)."""
    rows: np.ndarray
    index: np.ndarray
    shape: tuple
    dropped: int = 0

    def __len__(self):
        return len(self.index)

    def pixel_coords(self):
        ys, xs = np.divmod(self.index, self.shape[1])
        return xs.astype(np.float64), ys.astype(np.float64)


def warp_rigid(x, y, d, intrinsics, transform, shape=None):
    """
    Back-project pixels with inverse depth d, move them by `transform`
    and project again. Returns (x', y', z', valid). `shape` = (h, w)
    turns on the in-image test.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    ok_depth = np.isfinite(d) & (d > 0)
    d_safe = np.where(ok_depth, d, 1.0)

    if transform.is_identity():
        xw, yw, zw = x.copy(), y.copy(), 1.0 / d_safe
    else:
        points = intrinsics.backproject(x, y, d_safe)
        moved = transform.apply(points)
        zw = moved[..., 2]
        z_safe = np.where(np.abs(zw) > MIN_WARPED_DEPTH, zw, 1.0)
        xw = intrinsics.fx * moved[..., 0] / z_safe + intrinsics.cx
        yw = intrinsics.fy * moved[..., 1] / z_safe + intrinsics.cy

    valid = ok_depth & (zw > MIN_WARPED_DEPTH)
    if shape is not None:
        h, w = shape
        valid &= (xw >= 0.0) & (xw <= w - 1) & (yw >= 0.0) & (yw <= h - 1)
    return xw, yw, zw, valid


def occlusion_mask(xw, yw, zw, target_depth, slack=DEFAULT_OCCLUSION_SLACK):
    """
    z-buffer test against the target view. A warped point stays valid
    when it lands on target depth and the surface there is not closer
    than z' - slack. Nearest-pixel lookup, so depth edges are not blended.
    """
    if slack <= 0:
        raise ValueError("occlusion slack must be positive")
    xw = np.asarray(xw, dtype=np.float64)
    yw = np.asarray(yw, dtype=np.float64)
    zw = np.asarray(zw, dtype=np.float64)
    h, w = target_depth.shape
    xi = np.rint(np.where(np.isfinite(xw), xw, -1.0)).astype(np.intp)
    yi = np.rint(np.where(np.isfinite(yw), yw, -1.0)).astype(np.intp)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    d_target = np.zeros(xw.shape)
    d_target[inside] = target_depth.data[yi[inside], xi[inside]]
    has_surface = d_target > 0
    z_target = np.where(has_surface, 1.0 / np.where(has_surface, d_target, 1.0), np.inf)
    return inside & has_surface & ~(z_target < zw - slack)


def warp_jacobian_rigid(pu, pv, pd, intrinsics):
    """
    d(x', y')/d(xi) at xi = 0 with the inverse depth parameterisation.
    Scalars give a (2, 6) matrix, arrays an (N, 2, 6) stack.
    """
    pu, pv, pd = np.broadcast_arrays(np.asarray(pu, dtype=np.float64),
                                     np.asarray(pv, dtype=np.float64),
                                     np.asarray(pd, dtype=np.float64))
    zero = np.zeros(pu.shape)
    row_x = np.stack([-pu * pv, 1.0 + pu * pu, -pv, pd, zero, -pd * pu], axis=-1)
    row_y = np.stack([-1.0 - pv * pv, pu * pv, pu, zero, pd, -pd * pv], axis=-1)
    return np.stack([intrinsics.fx * row_x, intrinsics.fy * row_y], axis=-2)


def warp_affine(x, y, xi):
    x1, x2, x3, x4, x5, x6 = xi.xi
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return (1.0 + x1) * x + x3 * y + x5, x2 * x + (1.0 + x4) * y + x6


def warp_jacobian_affine(x, y):
    x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    zero = np.zeros(x.shape)
    one = np.ones(x.shape)
    row_x = np.stack([x, zero, y, zero, one, zero], axis=-1)
    row_y = np.stack([zero, x, zero, y, zero, one], axis=-1)
    return np.stack([row_x, row_y], axis=-2)


def steepest_descent_image(gradients, family, intrinsics=None, depth=None):
    """
    Precompute the IC design matrix for one pyramid level.

    affine: one row per pixel. rigid: one row per pixel with valid
    template depth; the others are dropped and counted.
    """
    gx, gy = gradients
    h, w = gx.shape
    ys, xs = np.mgrid[0:h, 0:w]
    xs = xs.ravel().astype(np.float64)
    ys = ys.ravel().astype(np.float64)
    index = np.arange(h * w)
    dropped = 0

    if family == AFFINE:
        jac = warp_jacobian_affine(xs, ys)
    elif family == RIGID:
        if intrinsics is None or depth is None:
            raise ValueError("rigid steepest-descent image needs intrinsics and depth")
        d = depth.data.ravel()
        keep = np.isfinite(d) & (d > 0)
        dropped = int(keep.size - keep.sum())
        index, xs, ys, d = index[keep], xs[keep], ys[keep], d[keep]
        pu, pv = intrinsics.normalize(xs, ys)
        jac = warp_jacobian_rigid(pu, pv, d, intrinsics)
    else:
        raise ValueError(f"unknown warp family {family!r}")

    grad = np.stack([gx.data.ravel()[index], gy.data.ravel()[index]], axis=-1)
    rows = np.einsum("nk,nkj->nj", grad, jac)
    if dropped:
        logger.debug(f"steepest descent: dropped {dropped} pixels without depth")
    return SteepestDescentImage(rows, index, (h, w), dropped)


def sample_warped(image, xw, yw, valid):
    """Bilinear lookup of `image` at warped coordinates, folded into `valid`"""
    values, inside = bilinear_sample_many(image, xw, yw)
    valid = valid & inside
    return np.where(valid, values, 0.0), valid
