"""
Diagonal robust weights W and the weighted normal equations.

A WeightField is a plain float array aligned with the rows of a
SteepestDescentImage / ResidualField; invalid pixels carry weight 0.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UnderdeterminedSystemError

logger = logging.getLogger(__name__)

NONE = "none"
HUBER = "huber"
TUKEY = "tukey"
KINDS = (NONE, HUBER, TUKEY)

DEFAULT_KIND = HUBER
DEFAULT_SCALE = 0.1
MIN_VALID_PIXELS = 6


@dataclass(frozen=True)
class RobustLossSpec:
    kind: str = DEFAULT_KIND
    scale: float = DEFAULT_SCALE

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown robust loss {self.kind!r}, expected one of {KINDS}")
        if self.kind != NONE and not (np.isfinite(self.scale) and self.scale > 0):
            raise ConfigError(f"robust scale must be positive, got {self.scale!r}")


@dataclass(frozen=True, eq=False)
class ResidualField:
    """r(u) = I(W(u; xi)) - T(u) for each steepest-descent row; 0 where invalid."""
    values: np.ndarray
    valid: np.ndarray

    @property
    def valid_count(self):
        return int(np.count_nonzero(self.valid))

    def restrict(self, mask):
        keep = self.valid & mask
        return ResidualField(np.where(keep, self.values, 0.0), keep)


def weight_function(r, spec):
    """w(r), normalised so that w(0) = 1"""
    r = np.abs(np.asarray(r, dtype=np.float64))
    if spec.kind == NONE:
        return np.ones_like(r)
    if spec.kind == HUBER:
        return np.where(r <= spec.scale, 1.0, spec.scale / np.maximum(r, spec.scale))
    u = r / spec.scale
    return np.where(r <= spec.scale, (1.0 - u * u) ** 2, 0.0)


def compute_weights(residuals, spec):
    """Per-row weights for the current residual; exactly 0 on invalid rows."""
    w = weight_function(residuals.values, spec)
    return np.where(residuals.valid, w, 0.0)


def weighted_objective(residuals, weights):
    """r^T W r / (valid count); +inf when nothing is valid"""
    n = residuals.valid_count
    if n == 0:
        return np.inf
    r = residuals.values
    wv = np.where(residuals.valid, weights, 0.0)
    return float(np.einsum("n,n->", wv, r * r) / n)


def weighted_normal_equations(sd, weights, residuals, min_valid=MIN_VALID_PIXELS):
    """
    H = J^T W J / n and g = J^T W r / n over the valid rows.

    einsum without BLAS keeps the reduction order fixed (ascending row).
    """
    n = residuals.valid_count
    if n < min_valid:
        raise UnderdeterminedSystemError(
            f"underdetermined system: {n} valid pixels, need at least {min_valid}")
    j = getattr(sd, "rows", sd)
    wv = np.where(residuals.valid, weights, 0.0)
    h = np.einsum("n,ni,nj->ij", wv, j, j) / n
    h = 0.5 * (h + h.T)
    g = np.einsum("n,ni->i", wv * residuals.values, j) / n
    return h, g
