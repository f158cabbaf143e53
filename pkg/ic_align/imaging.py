"""
Image containers, bilinear sampling, Sobel gradients and pyramids.

Coordinates are (x, y) = (column, row) with pixel centres on integers.
Depth channels carry inverse depth d = 1/z; d == 0 marks a hole.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ImageTooSmallError, PyramidTooDeepError

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = 4
MIN_LEVEL_SIZE = 8
MAX_INVERSE_DEPTH = 10.0

# 3x3 Sobel, scaled so a unit ramp gives a unit gradient
SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]]) / 8.0
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True, eq=False)
class ScalarImage:
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"expected a 2D grid, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image values must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape


class InverseDepthImage(ScalarImage):
    """Inverse depth in 1/m, clamped to [0, 10]; zero means no depth."""

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        data[~np.isfinite(data)] = 0.0
        object.__setattr__(self, "data", np.clip(data, 0.0, MAX_INVERSE_DEPTH))
        super().__post_init__()

    @classmethod
    def from_depth(cls, depth):
        """Build from metric depth; non-positive or non-finite depth becomes a hole"""
        depth = np.asarray(depth, dtype=np.float64)
        ok = np.isfinite(depth) & (depth > 0)
        inv = np.zeros_like(depth)
        inv[ok] = 1.0 / depth[ok]
        return cls(inv)

    @property
    def valid(self):
        return self.data > 0

    def depth(self):
        """Metric depth, 0 where invalid"""
        out = np.zeros_like(self.data)
        ok = self.valid
        out[ok] = 1.0 / self.data[ok]
        return out


@dataclass(frozen=True, eq=False)
class Frame:
    """One view: intensity plus optional inverse depth of the same size."""
    intensity: ScalarImage
    depth: InverseDepthImage | None = None

    def __post_init__(self):
        if self.depth is not None and self.depth.shape != self.intensity.shape:
            raise ValueError(f"depth {self.depth.shape} and intensity {self.intensity.shape} differ")

    @property
    def shape(self):
        return self.intensity.shape


def bilinear_sample_many(img, xs, ys):
    """Vectorised bilinear lookup. Returns (values, valid); invalid values are 0."""
    data = img.data
    h, w = data.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    valid = (np.isfinite(xs) & np.isfinite(ys)
             & (xs >= 0.0) & (xs <= w - 1) & (ys >= 0.0) & (ys <= h - 1))
    xc = np.where(valid, xs, 0.0)
    yc = np.where(valid, ys, 0.0)
    x0 = np.clip(np.floor(xc).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = xc - x0
    ay = yc - y0

    v00 = data[y0, x0]
    v01 = data[y0, x1]
    v10 = data[y1, x0]
    v11 = data[y1, x1]
    values = (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01) + ay * ((1.0 - ax) * v10 + ax * v11)

    if isinstance(img, InverseDepthImage):
        valid &= (v00 > 0) & (v01 > 0) & (v10 > 0) & (v11 > 0)
    return np.where(valid, values, 0.0), valid


def bilinear_sample(img, x, y):
    """Single-point lookup -> (value, valid)"""
    values, valid = bilinear_sample_many(img, np.array([x]), np.array([y]))
    return float(values[0]), bool(valid[0])


def sobel_gradients(img):
    """(gx, gy) with replicate padding at the border"""
    if img.width < 3 or img.height < 3:
        raise ImageTooSmallError(f"image too small for Sobel: {img.width}x{img.height}")
    gx = ndimage.correlate(img.data, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(img.data, SOBEL_Y, mode="nearest")
    return ScalarImage(gx), ScalarImage(gy)


def pool_mean(data):
    """2x2 non-overlapping mean; odd trailing row/column dropped"""
    h2, w2 = data.shape[0] // 2, data.shape[1] // 2
    return data[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def pool_inverse_depth(data):
    """Mean over the valid entries of each 2x2 block; a block with none stays a hole"""
    h2, w2 = data.shape[0] // 2, data.shape[1] // 2
    blocks = data[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2)
    ok = blocks > 0
    count = ok.sum(axis=(1, 3))
    total = np.where(ok, blocks, 0.0).sum(axis=(1, 3))
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


@dataclass(frozen=True, eq=False)
class ImagePyramid:
    """Finest level first; gradients[l] is the Sobel pair of levels[l]."""
    levels: list
    gradients: list = field(default_factory=list)
    depth: list | None = None

    def __len__(self):
        return len(self.levels)


def build_pyramid(img, levels=DEFAULT_LEVELS, depth=None, min_size=MIN_LEVEL_SIZE,
                  with_gradients=True):
    """Average-pool `img` (and optionally its inverse depth) into `levels` scales."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = img.shape
    coarse_h, coarse_w = h >> (levels - 1), w >> (levels - 1)
    if coarse_h < min_size or coarse_w < min_size:
        raise PyramidTooDeepError(
            f"pyramid too deep: {levels} levels of {w}x{h} leave {coarse_w}x{coarse_h} "
            f"(need >= {min_size}x{min_size})")

    images = [img]
    depths = [depth] if depth is not None else None
    for _ in range(1, levels):
        images.append(ScalarImage(pool_mean(images[-1].data)))
        if depths is not None:
            depths.append(InverseDepthImage(pool_inverse_depth(depths[-1].data)))

    gradients = [sobel_gradients(level) for level in images] if with_gradients else []
    logger.debug(f"built {levels}-level pyramid from {w}x{h}")
    return ImagePyramid(images, gradients, depths)


def frame_pyramid(frame, levels=DEFAULT_LEVELS, min_size=MIN_LEVEL_SIZE):
    return build_pyramid(frame.intensity, levels, depth=frame.depth, min_size=min_size)
