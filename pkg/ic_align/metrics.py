"""Pose and warp error metrics: 3D end-point error, relative pose error, success ratios."""
import logging
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError
from .geometry import compose_rigid, invert_rigid

logger = logging.getLogger(__name__)

M_TO_CM = 100.0
DEFAULT_ROT_THRESHOLD = 5.0    # degrees
DEFAULT_TRANS_THRESHOLD = 5.0  # centimetres


@dataclass(frozen=True)
class PoseError:
    rotation_error: float     # degrees
    translation_error: float  # centimetres

    def __post_init__(self):
        if self.rotation_error < 0 or self.translation_error < 0:
            raise ValueError(f"pose errors must be non-negative, got {self}")


def epe3d(points, t_est, t_gt):
    """Mean ||T_gt p - T_est p|| over the points, in cm (points in metres)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyInputError("epe3d needs at least one point")
    diff = t_gt.apply(points) - t_est.apply(points)
    return float(np.mean(np.linalg.norm(diff, axis=1)) * M_TO_CM)


def rotation_angle(rotation):
    """Axis-angle magnitude of a rotation matrix, radians"""
    cos_theta = np.clip(0.5 * (np.trace(rotation) - 1.0), -1.0, 1.0)
    sin_theta = 0.5 * np.linalg.norm([rotation[2, 1] - rotation[1, 2],
                                      rotation[0, 2] - rotation[2, 0],
                                      rotation[1, 0] - rotation[0, 1]])
    return float(np.arctan2(sin_theta, cos_theta))


def relative_pose_error(t_est, t_gt):
    """Error transform E = T_gt^-1 . T_est as (degrees, cm)."""
    err = compose_rigid(invert_rigid(t_gt), t_est)
    return PoseError(float(np.degrees(rotation_angle(err.rotation))),
                     float(np.linalg.norm(err.translation) * M_TO_CM))


def success_ratio(errors, rot_thresh=DEFAULT_ROT_THRESHOLD, trans_thresh=DEFAULT_TRANS_THRESHOLD):
    """Fraction of errors strictly below both thresholds."""
    if not (rot_thresh > 0 and trans_thresh > 0):
        raise ValueError("success thresholds must be positive")
    errors = list(errors)
    if not errors:
        raise EmptyInputError("success_ratio over an empty list")
    hits = sum(1 for e in errors
               if e.rotation_error < rot_thresh and e.translation_error < trans_thresh)
    return hits / len(errors)


def affine_l1(est, gt):
    return float(np.sum(np.abs(np.asarray(est.xi) - np.asarray(gt.xi))))


def mean_pose_error(errors):
    errors = list(errors)
    if not errors:
        raise EmptyInputError("mean_pose_error over an empty list")
    return PoseError(float(np.mean([e.rotation_error for e in errors])),
                     float(np.mean([e.translation_error for e in errors])))
