"""PNG dumps of an alignment: template, image warped into the template frame, residual map."""
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .imaging import sobel_gradients
from .solver import AffineLevel, RigidLevel
from .warp import AFFINE

logger = logging.getLogger(__name__)

INVALID_COLOR = (255, 0, 0)  # red where the warp leaves the image or is occluded


def _to_bytes(data):
    return np.rint(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)


def warped_and_residual(template, image, result, intrinsics=None, occlusion_slack=None):
    """
    Image resampled at the warped template grid and the residual
    I(W(x)) - T(x), both on the finest level. Returns (warped, residual, valid) 2D arrays.
    """
    grads = sobel_gradients(template.intensity)
    if result.family == AFFINE:
        problem = AffineLevel(template.intensity, grads, image.intensity)
    else:
        kwargs = {} if occlusion_slack is None else {"occlusion_slack": occlusion_slack}
        problem = RigidLevel(template.intensity, grads, template.depth, image.intensity,
                             image.depth, intrinsics, **kwargs)
    r = problem.residual(result.estimate)
    h, w = template.shape
    residual = np.zeros(h * w)
    valid = np.zeros(h * w, dtype=bool)
    residual[problem.sd.index] = r.values
    valid[problem.sd.index] = r.valid
    warped = np.where(valid, residual + template.intensity.data.ravel(), 0.0)
    return warped.reshape(h, w), residual.reshape(h, w), valid.reshape(h, w)


def dump_debug_images(out_dir, template, image, result, intrinsics=None):
    """Write template.png, warped.png and residual.png (grey = 0) under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    warped, residual, valid = warped_and_residual(template, image, result, intrinsics)

    Image.fromarray(_to_bytes(template.intensity.data)).save(out / "template.png")
    Image.fromarray(_to_bytes(warped)).save(out / "warped.png")

    grey = _to_bytes(0.5 + 0.5 * residual)
    rgb = np.repeat(grey[..., None], 3, axis=2)
    rgb[~valid] = INVALID_COLOR
    Image.fromarray(rgb).save(out / "residual.png")
    logger.info(f"debug images written to {out}")
    return [out / "template.png", out / "warped.png", out / "residual.png"]
