"""
Seeded synthetic ground truth for both warp families.

Affine pairs resample a source image through a random crop-local warp.
RGB-D pairs ray-cast textured planes from two camera poses, so depth and
pose are exact.
"""
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GroundTruthError, InsufficientMarginError, MotionTooLargeError
from .geometry import AffineParams, RigidTransform, affine_inverse, exp_se3, invert_rigid
from .imaging import Frame, InverseDepthImage, ScalarImage, bilinear_sample_many
from .warp import (CameraIntrinsics, DEFAULT_OCCLUSION_SLACK, occlusion_mask,
                   sample_warped, warp_affine, warp_rigid)

logger = logging.getLogger(__name__)

TEXTURE_COMPONENTS = 8
TEXTURE_CONTRAST = 0.4          # summed cosine amplitude; intensities stay in [0.1, 0.9]
AFFINE_TEXTURE_PERIODS = (40.0, 120.0)   # pixels
PLANE_TEXTURE_PERIODS = (0.25, 0.7)      # metres on the plane

DEFAULT_CROP = (320, 240)
DEFAULT_LINEAR_BOUND = 0.05
DEFAULT_TRANSLATION_BOUND = 8.0

DEFAULT_RGBD_SIZE = (160, 120)
DEFAULT_PLANE_DEPTH = 1.5
DEFAULT_MAX_ROTATION = 3.0       # degrees
DEFAULT_MAX_TRANSLATION = 0.03   # metres
MIN_SCENE_DEPTH = 0.1
MAX_SCENE_DEPTH = 10.0
MIN_VISIBLE_FRACTION = 0.7

TEXTURED_PLANE = "textured_plane"
TWO_PLANES = "two_planes"
SCENES = (TEXTURED_PLANE, TWO_PLANES)

COORDINATE_TOL = 1e-9
AFFINE_PHOTOMETRIC_TOL = 5e-3
RGBD_PHOTOMETRIC_TOL = 5e-3
RAYCAST_TOL = 1e-9


def default_intrinsics(width, height):
    """Pinhole camera with a ~62 degree horizontal field of view, centred"""
    f = 131.25 * width / 160.0
    return CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


@dataclass(frozen=True, eq=False)
class CosineTexture:
    """Sum of seeded cosines: 0.5 + sum_k a_k cos(2 pi f_k . (u, v) + phi_k)."""
    frequencies: np.ndarray
    phases: np.ndarray
    amplitudes: np.ndarray

    @classmethod
    def random(cls, rng, periods=AFFINE_TEXTURE_PERIODS, components=TEXTURE_COMPONENTS):
        lo, hi = periods
        period = rng.uniform(lo, hi, components)
        angle = rng.uniform(0.0, np.pi, components)
        frequencies = np.stack([np.cos(angle), np.sin(angle)], axis=1) / period[:, None]
        phases = rng.uniform(0.0, 2.0 * np.pi, components)
        amplitudes = rng.uniform(0.5, 1.0, components)
        amplitudes *= TEXTURE_CONTRAST / amplitudes.sum()
        return cls(frequencies, phases, amplitudes)

    def __call__(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        arg = (np.multiply.outer(u, self.frequencies[:, 0])
               + np.multiply.outer(v, self.frequencies[:, 1]) + self.phases)
        return 0.5 + np.cos(2.0 * np.pi * arg) @ self.amplitudes

    def render(self, width, height, origin=(0.0, 0.0)):
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        return ScalarImage(self(xs + origin[0], ys + origin[1]))


def _add_noise(data, sigma, rng):
    if sigma <= 0:
        return data
    return np.clip(data + rng.normal(0.0, sigma, data.shape), 0.0, 1.0)


@dataclass(frozen=True)
class AffineGenSpec:
    seed: int = 0
    crop: tuple = DEFAULT_CROP
    linear_bound: float = DEFAULT_LINEAR_BOUND
    translation_bound: float = DEFAULT_TRANSLATION_BOUND
    noise_sigma: float = 0.0
    xi: tuple | None = None  # fixed ground truth instead of a draw
    consistency_tol: float = AFFINE_PHOTOMETRIC_TOL

    def validate(self):
        w, h = self.crop
        if w < 8 or h < 8:
            raise ConfigError(f"crop too small: {self.crop}")
        if self.linear_bound < 0 or self.translation_bound < 0 or self.noise_sigma < 0:
            raise ConfigError("bounds and noise must be non-negative")
        if self.linear_bound >= 0.5:
            raise ConfigError("linear bound must stay below 0.5 to keep the warp invertible")
        if self.xi is not None and len(self.xi) != 6:
            raise ConfigError("fixed affine ground truth needs six parameters")
        return self

    @property
    def bounds(self):
        lb, tb = self.linear_bound, self.translation_bound
        return np.array([lb, lb, lb, lb, tb, tb])

    def source_margin(self):
        """Source border needed around the crop for any draw within bounds"""
        w, h = self.crop
        return int(math.ceil(1.25 * (self.translation_bound + self.linear_bound * (w + h)))) + 2

    def source_size(self):
        m = self.source_margin()
        return self.crop[0] + 2 * m, self.crop[1] + 2 * m


class AffinePair(NamedTuple):
    template: ScalarImage
    image: ScalarImage
    xi_gt: AffineParams


def draw_affine(spec, rng):
    if spec.xi is not None:
        return AffineParams(spec.xi)
    b = spec.bounds
    return AffineParams(rng.uniform(-b, b))


def default_affine_source(spec):
    """Cosine texture big enough for any draw of `spec`"""
    rng = np.random.default_rng([spec.seed, 1])
    w, h = spec.source_size()
    return CosineTexture.random(rng).render(w, h)


def gen_affine_pair(source, spec):
    """
    Crop `source` centrally as the template and resample the matching
    image crop, so that warp_affine(x, xi_gt) maps template pixel x
    onto the image pixel showing the same content.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    w, h = spec.crop
    src_h, src_w = source.shape
    if src_w - w < 2 * spec.translation_bound or src_h - h < 2 * spec.translation_bound:
        raise InsufficientMarginError(
            f"insufficient margin: source {src_w}x{src_h} for a {w}x{h} crop "
            f"with translations up to {spec.translation_bound} px")
    ox, oy = (src_w - w) // 2, (src_h - h) // 2

    xi_gt = draw_affine(spec, rng)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    template = ScalarImage(source.data[oy:oy + h, ox:ox + w])

    # image pixel y shows the source at W^-1(y)
    bx, by = warp_affine(xs, ys, affine_inverse(xi_gt))
    values, inside = bilinear_sample_many(source, bx + ox, by + oy)
    if not inside.all():
        raise InsufficientMarginError(
            f"insufficient margin: {int((~inside).sum())} image samples fall outside "
            f"the {src_w}x{src_h} source")
    image = ScalarImage(values)

    check_affine_pair(template, image, xi_gt, (bx, by), spec.consistency_tol)

    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng([spec.seed, 2])
        template = ScalarImage(_add_noise(template.data, spec.noise_sigma, noise_rng))
        image = ScalarImage(_add_noise(image.data, spec.noise_sigma, noise_rng))
    return AffinePair(template, image, xi_gt)


def render_affine_pair(spec):
    """gen_affine_pair over the default cosine source"""
    return gen_affine_pair(default_affine_source(spec), spec)


def check_affine_pair(template, image, xi_gt, back_coords=None, tol=AFFINE_PHOTOMETRIC_TOL):
    """
    Ground-truth oracle: warping the image by xi_gt must reproduce the
    template. Raises GroundTruthError when it does not.
    """
    h, w = template.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if back_coords is not None:
        fx, fy = warp_affine(*back_coords, xi_gt)
        coord_err = float(max(np.abs(fx - xs).max(), np.abs(fy - ys).max()))
        if coord_err > COORDINATE_TOL:
            raise GroundTruthError(f"affine ground truth off by {coord_err:.3e} px")

    wx, wy = warp_affine(xs, ys, xi_gt)
    values, valid = bilinear_sample_many(image, wx, wy)
    interior = np.zeros_like(valid)
    interior[1:-1, 1:-1] = True
    valid &= interior
    if not valid.any():
        raise GroundTruthError("affine ground truth leaves no overlap")
    err = float(np.mean(np.abs(values[valid] - template.data[valid])))
    if err > tol:
        raise GroundTruthError(f"affine pair inconsistent: mean abs error {err:.3e} > {tol:g}")
    return err


@dataclass(frozen=True)
class RgbdSceneSpec:
    seed: int = 0
    size: tuple = DEFAULT_RGBD_SIZE
    intrinsics: CameraIntrinsics | None = None
    scene: str = TEXTURED_PLANE
    plane_depth: float = DEFAULT_PLANE_DEPTH
    plane_normal: tuple = (0.0, 0.0, 1.0)
    near_depth: float = 1.2
    far_depth: float = 2.0
    split: float = 0.5               # image column fraction where the near plane ends
    texture_periods: tuple = PLANE_TEXTURE_PERIODS
    max_rotation: float = DEFAULT_MAX_ROTATION
    max_translation: float = DEFAULT_MAX_TRANSLATION
    noise_sigma: float = 0.0
    motion: tuple | None = None     # fixed twist (w, v) instead of a draw
    consistency_tol: float = RGBD_PHOTOMETRIC_TOL

    def validate(self):
        if self.scene not in SCENES:
            raise ConfigError(f"unknown scene {self.scene!r}, expected one of {SCENES}")
        depths = ((self.plane_depth,) if self.scene == TEXTURED_PLANE
                  else (self.near_depth, self.far_depth))
        for d in depths:
            if not MIN_SCENE_DEPTH < d < MAX_SCENE_DEPTH:
                raise ConfigError(f"scene depth {d} outside ({MIN_SCENE_DEPTH}, {MAX_SCENE_DEPTH}) m")
        if self.scene == TWO_PLANES and not self.near_depth < self.far_depth:
            raise ConfigError("near plane must be in front of the far plane")
        if not 0.0 < self.split < 1.0:
            raise ConfigError("split must be a column fraction in (0, 1)")
        n = np.asarray(self.plane_normal, dtype=np.float64)
        if n.shape != (3,) or np.linalg.norm(n) == 0 or n[2] <= 0:
            raise ConfigError("plane normal must be a 3-vector facing the camera (n_z > 0)")
        if self.max_rotation < 0 or self.max_translation < 0 or self.noise_sigma < 0:
            raise ConfigError("motion bounds and noise must be non-negative")
        if self.motion is not None and len(self.motion) != 6:
            raise ConfigError("fixed motion needs a 6-vector twist")
        return self

    def camera(self):
        return self.intrinsics or default_intrinsics(*self.size)


class RgbdPair(NamedTuple):
    template: Frame
    image: Frame
    transform: RigidTransform
    intrinsics: CameraIntrinsics


@dataclass(frozen=True, eq=False)
class _Plane:
    """n . X = offset in template-camera coordinates, with a texture basis."""
    normal: np.ndarray
    offset: float
    basis: np.ndarray
    x_max: float = np.inf   # template-frame X extent, for the near plane of two_planes

    @classmethod
    def facing(cls, normal, depth, x_max=np.inf):
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        e1 = np.cross([0.0, 1.0, 0.0], n)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return cls(n, float(n[2] * depth), np.stack([e1, e2]), x_max)


@dataclass(frozen=True, eq=False)
class PlaneScene:
    """Textured planes, defined in the template camera frame."""
    planes: tuple
    texture: CosineTexture

    @classmethod
    def from_spec(cls, spec, texture):
        if spec.scene == TEXTURED_PLANE:
            return cls((_Plane.facing(spec.plane_normal, spec.plane_depth),), texture)
        k = spec.camera()
        x_split = (spec.split * spec.size[0] - 0.5 - k.cx) / k.fx * spec.near_depth
        return cls((_Plane.facing((0.0, 0.0, 1.0), spec.near_depth, x_max=x_split),
                    _Plane.facing((0.0, 0.0, 1.0), spec.far_depth)), texture)

    def cast(self, intrinsics, xs, ys, camera_to_template):
        """
        Intensity and metric depth seen through pixels (xs, ys) of a camera
        whose points map into the template frame by `camera_to_template`.
        Nearest hit wins; misses get depth 0.
        """
        pu, pv = intrinsics.normalize(xs, ys)
        rays = np.stack([pu, pv, np.ones_like(pu)], axis=-1)
        origin = camera_to_template.translation
        dirs = rays @ camera_to_template.rotation.T

        depth = np.full(pu.shape, np.inf)
        intensity = np.zeros(pu.shape)
        for k, plane in enumerate(self.planes):
            denom = dirs @ plane.normal
            ok = denom > 1e-12
            s = (plane.offset - origin @ plane.normal) / np.where(ok, denom, 1.0)
            ok &= s > 0
            s = np.where(ok, s, 0.0)
            hit = origin + s[..., None] * dirs
            ok &= hit[..., 0] <= plane.x_max
            closer = ok & (s < depth)
            uv = hit @ plane.basis.T
            shade = self.texture(uv[..., 0] + 3.7 * k, uv[..., 1])
            depth = np.where(closer, s, depth)
            intensity = np.where(closer, shade, intensity)
        depth[~np.isfinite(depth)] = 0.0
        return intensity, depth

    def render(self, intrinsics, shape, camera_to_template):
        h, w = shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        return self.cast(intrinsics, xs, ys, camera_to_template)


def draw_motion(spec, rng):
    if spec.motion is not None:
        return exp_se3(spec.motion)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, spec.max_rotation))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    rotation = exp_se3(np.concatenate([axis * angle, np.zeros(3)])).rotation
    return RigidTransform(rotation, direction * rng.uniform(0.0, spec.max_translation))


def gen_rgbd_pair(spec):
    """
    Render a template and an image frame of the same scene. The returned
    transform maps template-camera points to image-camera points.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k = spec.camera()
    w, h = spec.size
    scene = PlaneScene.from_spec(spec, CosineTexture.random(rng, periods=spec.texture_periods))
    t_gt = draw_motion(spec, rng)

    t_int, t_depth = scene.render(k, (h, w), RigidTransform.identity())
    i_int, i_depth = scene.render(k, (h, w), invert_rigid(t_gt))
    template = Frame(ScalarImage(t_int), InverseDepthImage.from_depth(t_depth))
    image = Frame(ScalarImage(i_int), InverseDepthImage.from_depth(i_depth))

    check_rgbd_pair(template, image, t_gt, k, scene, spec.consistency_tol)

    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng([spec.seed, 2])
        template = Frame(ScalarImage(_add_noise(t_int, spec.noise_sigma, noise_rng)), template.depth)
        image = Frame(ScalarImage(_add_noise(i_int, spec.noise_sigma, noise_rng)), image.depth)
    return RgbdPair(template, image, t_gt, k)


def _depth_edges(depth, slack=DEFAULT_OCCLUSION_SLACK):
    z = depth.depth()
    return (ndimage.maximum_filter(z, size=3, mode="nearest")
            - ndimage.minimum_filter(z, size=3, mode="nearest")) > slack


def check_rgbd_pair(template, image, t_gt, intrinsics, scene, tol=RGBD_PHOTOMETRIC_TOL):
    """
    Visibility precondition and ground-truth oracles for a rendered pair.

    Each template pixel moved by t_gt is re-cast from the image camera;
    where the hit is the same surface point (co-visible) its shade must
    equal the template's. The bilinear warp of the image by t_gt must
    then reproduce the template away from depth edges.
    """
    h, w = template.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    d = template.depth.data
    has_depth = d > 0
    xs, ys, d = xs[has_depth], ys[has_depth], d[has_depth]
    shade_t = template.intensity.data[has_depth]

    xw, yw, zw, valid = warp_rigid(xs, ys, d, intrinsics, t_gt, shape=(h, w))
    visible = valid.sum() / (h * w)
    if visible < MIN_VISIBLE_FRACTION:
        raise MotionTooLargeError(
            f"motion too large for scene: {visible:.0%} of pixels stay in view, "
            f"need {MIN_VISIBLE_FRACTION:.0%}")

    shade_i, depth_i = scene.cast(intrinsics, xw[valid], yw[valid], invert_rigid(t_gt))
    covisible = np.abs(depth_i - zw[valid]) <= RAYCAST_TOL * np.maximum(zw[valid], 1.0)
    if not covisible.any():
        raise GroundTruthError("rigid ground truth leaves no co-visible pixels")
    gap = float(np.abs(shade_i[covisible] - shade_t[valid][covisible]).max())
    if gap > RAYCAST_TOL:
        raise GroundTruthError(f"rigid ground truth off: shade mismatch {gap:.3e}")

    keep = np.zeros_like(valid)
    keep[np.flatnonzero(valid)[covisible]] = True
    keep &= occlusion_mask(xw, yw, zw, image.depth)
    edges = _depth_edges(image.depth)
    xi = np.clip(np.rint(xw), 0, w - 1).astype(np.intp)
    yi = np.clip(np.rint(yw), 0, h - 1).astype(np.intp)
    keep &= ~edges[yi, xi]
    values, ok = sample_warped(image.intensity, xw, yw, keep)
    if not ok.any():
        raise GroundTruthError("rigid ground truth leaves no co-visible pixels")
    err = float(np.mean(np.abs(values[ok] - shade_t[ok])))
    if err > tol:
        raise GroundTruthError(f"rgbd pair inconsistent: mean abs error {err:.3e} > {tol:g}")
    return err


def add_occluders(image, fraction, rng, min_side=0.05, max_side=0.2):
    """
    Paste uniform-noise rectangles until at least `fraction` of the
    pixels are covered. Returns (corrupted image, covered mask).
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"occluder fraction must be in [0, 1), got {fraction}")
    h, w = image.shape
    data = np.array(image.data)
    covered = np.zeros((h, w), dtype=bool)
    while covered.mean() < fraction:
        rw = max(1, int(rng.uniform(min_side, max_side) * w))
        rh = max(1, int(rng.uniform(min_side, max_side) * h))
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        data[y0:y0 + rh, x0:x0 + rw] = rng.uniform(0.0, 1.0, (rh, rw))
        covered[y0:y0 + rh, x0:x0 + rw] = True
    return ScalarImage(data), covered
